#pragma once

// Student-t NLL training: batches, Adam, spectral augmentation and the
// (multi-dataset) training loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "strada/autograd.hpp"
#include "strada/datahub.hpp"
#include "strada/error.hpp"
#include "strada/features.hpp"
#include "strada/model.hpp"
#include "strada/rng.hpp"

namespace strada {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 150;
  // Optimizer steps per epoch; the sampler draws with replacement, so an
  // epoch is a fixed budget rather than a pass over every window.
  std::size_t batches_per_epoch = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  bool augment = true;
  double freq_mask_ratio = 0.1;
  double freq_mix_ratio = 0.1;
  double freq_mask_prob = 0.5;
  double freq_mix_prob = 0.5;
  // Cap on the windows used for the per-epoch train/validation NLL.
  std::size_t eval_windows = 512;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Admissible window ends [first, last] of one dataset.
struct DatasetView {
  const DatasetBundle* bundle = nullptr;
  const GraphContext* graph = nullptr;
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t windows() const { return last - first + 1; }
};

// Windows whose targets all lie in `range`; DataError when there are none.
DatasetView split_view(const DatasetBundle& bundle, const GraphContext& graph, const Range& range,
                       const FeatureConfig& cfg, std::size_t context_length);

template <typename T>
struct Batch {
  std::size_t id = 0;
  std::size_t seq_len = 0;
  Tensor<T> tokens;        // (sequences · seq_len) × token_dim
  std::vector<T> targets;  // sequences · seq_len

  std::size_t sequences() const { return seq_len == 0 ? 0 : targets.size() / seq_len; }
};

template <typename T>
Batch<T> make_batch(std::span<const Sample> samples, std::size_t id = 0) {
  if (samples.empty()) throw InputError("make_batch: empty batch");
  const std::size_t seq = samples[0].targets.size();
  const std::size_t dim = seq == 0 ? 0 : samples[0].tokens.size() / seq;
  Batch<T> b;
  b.id = id;
  b.seq_len = seq;
  b.tokens = Tensor<T>({samples.size() * seq, dim});
  b.targets.reserve(samples.size() * seq);
  std::size_t k = 0;
  for (const auto& s : samples) {
    if (s.targets.size() != seq || s.tokens.size() != seq * dim) {
      throw DimensionError("make_batch: samples have different shapes");
    }
    for (double v : s.tokens) b.tokens[k++] = static_cast<T>(v);
    for (double y : s.targets) b.targets.push_back(static_cast<T>(y));
  }
  return b;
}

// Mean NLL over every (sequence, position) pair of the batch.
template <typename T>
Var<T> batch_nll(const ModelParams<T>& p, const ModelVars<T>& m, Tape<T>& tape, const Batch<T>& b) {
  if (b.targets.empty()) throw InputError("batch_nll: empty batch");
  Var<T> loss = sequence_nll(p, m, tape.bind(b.tokens, false), std::span<const T>(b.targets), b.seq_len);
  if (!std::isfinite(loss.value()[0])) {
    throw NumericError("non-finite NLL in batch " + std::to_string(b.id));
  }
  return loss;
}

template <typename T>
double batch_nll_value(const ModelParams<T>& p, const Batch<T>& b) {
  Tape<T> tape;
  const ModelVars<T> m = bind_model(tape, p);
  return static_cast<double>(batch_nll(p, m, tape, b).value()[0]);
}

// Per-sample mean NLL over positions, in scaled units, evaluated in chunks.
template <typename T>
std::vector<double> sample_nll(const ModelParams<T>& p, std::span<const Sample> samples,
                               std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(samples.size());
  const auto head = head_transform<double>(p.config);
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const std::size_t end = std::min(samples.size(), begin + chunk);
    const Batch<T> b = make_batch<T>(samples.subspan(begin, end - begin));
    const ForwardOutput<T> f = forward(p, b.tokens, b.seq_len);
    for (std::size_t s = 0; s < end - begin; ++s) {
      double total = 0.0;
      for (std::size_t q = 0; q < b.seq_len; ++q) {
        const std::size_t r = s * b.seq_len + q;
        total += ag::student_t_nll_value<double>(head.nu(f.head(r, 0)), head.mu(f.head(r, 1)),
                                                 head.sigma(f.head(r, 2)), b.targets[r]);
      }
      out.push_back(total / static_cast<double>(b.seq_len));
    }
  }
  return out;
}

template <typename T>
double mean_nll(const ModelParams<T>& p, std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("mean_nll: no samples");
  const auto per = sample_nll(p, samples);
  double total = 0.0;
  for (double v : per) total += v;
  return total / static_cast<double>(per.size());
}

// ---- Adam ------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
};

template <typename T>
struct AdamTarget {
  Tensor<T>* value = nullptr;
  const Tensor<T>* grad = nullptr;
  bool decay = false;  // decoupled weight decay applies
};

// Bias-corrected Adam with decoupled weight decay p ← p·(1 − lr·wd).
template <typename T>
void adam_step(std::span<const AdamTarget<T>> targets, AdamState<T>& state, const TrainConfig& cfg) {
  if (state.step == 0 && state.m.empty()) {
    for (const auto& t : targets) {
      state.m.emplace_back(t.value->shape());
      state.v.emplace_back(t.value->shape());
    }
  }
  if (state.m.size() != targets.size()) {
    throw DimensionError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                         " tensors, got " + std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].grad->shape() != targets[i].value->shape() ||
        state.m[i].shape() != targets[i].value->shape()) {
      throw DimensionError("adam_step: shape mismatch " + shape_str(targets[i].value->shape()) +
                           " vs " + shape_str(targets[i].grad->shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.adam_eps);
  const T shrink = static_cast<T>(1.0 - cfg.learning_rate * cfg.weight_decay);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Tensor<T>& p = *targets[i].value;
    const Tensor<T>& g = *targets[i].grad;
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const T keep = targets[i].decay ? shrink : T{1};
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      p[k] = p[k] * keep - lr * (m[k] * ic1) / (std::sqrt(v[k] * ic2) + eps);
    }
  }
}

// ---- Spectral augmentation -------------------------------------------------

// Zeroes ⌈ratio·(bins − 1)⌉ random non-DC bins of the real spectrum
// (bins = ⌊n/2⌋ + 1). `imag_residue`, when given, receives the largest
// imaginary part left by the inverse transform.
std::vector<double> freq_mask(std::span<const double> window, double ratio, RngStream& stream,
                              double* imag_residue = nullptr);
// Replaces ⌈ratio·bins⌉ random bins of w1's spectrum with w2's.
std::vector<double> freq_mix(std::span<const double> w1, std::span<const double> w2, double ratio,
                             RngStream& stream, double* imag_residue = nullptr);

// ---- Training loop ---------------------------------------------------------

struct WindowDraw {
  std::size_t dataset = 0;
  std::size_t node = 0;
  std::size_t window_end = 0;
};

// Dataset, then node, then window end, each uniform.
WindowDraw draw_window(std::span<const DatasetView> views, RngStream& stream);

// Training window with optional augmentation of the raw neighborhood
// history before featurization.
Sample training_sample(const DatasetView& view, std::size_t node, std::size_t window_end,
                       const FeatureConfig& fc, std::size_t context_length, const TrainConfig& tc,
                       RngStream& aug);

// Unaugmented windows spaced `stride` apart for every node, thinned evenly
// to at most `limit` (0 keeps all).
std::vector<Sample> evaluation_samples(const DatasetView& view, const FeatureConfig& fc,
                                       std::size_t context_length, std::size_t stride,
                                       std::size_t limit);

struct EpochRecord {
  std::size_t epoch = 0;       // 0 is the state before training
  double train_nll = 0.0;      // on a fixed set of unaugmented train windows
  double val_nll = 0.0;
  double batch_nll = 0.0;      // mean loss of the epoch's optimizer steps
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_nll = std::numeric_limits<double>::infinity();
  std::string failure;  // set when training stopped on a numeric failure

  bool failed() const { return !failure.empty(); }
};

struct TrainResult {
  ModelParams<float> params;        // best validation epoch
  ModelParams<float> final_params;  // after the last completed step
  TrainReport report;
};

using TrainableFilter = std::function<bool(const std::string&)>;

// Trains the tensors accepted by `trainable` (all when empty). A line of JSON
// per (epoch, split) goes to `log` when given.
TrainResult train_model(ModelParams<float> init, std::span<const DatasetView> train,
                        std::span<const DatasetView> val, const FeatureConfig& fc,
                        const TrainConfig& tc, const TrainableFilter& trainable = {},
                        std::ostream* log = nullptr);

// Fresh model trained on the train splits of `datasets`, validated on their
// validation splits.
TrainResult pretrain(std::span<const DatasetBundle> datasets, ModelConfig mc, const FeatureConfig& fc,
                     const TrainConfig& tc, std::ostream* log = nullptr);

}  // namespace strada
