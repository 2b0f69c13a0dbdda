#include "strada/train.hpp"

#include <algorithm>
#include <chrono>
#include <complex>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

namespace strada {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be nonnegative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (batches_per_epoch == 0) throw ConfigError("train: batches_per_epoch must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0) || clip_norm < 0.0) throw ConfigError("train: bad adam_eps or clip_norm");
  for (double r : {freq_mask_ratio, freq_mix_ratio, freq_mask_prob, freq_mix_prob}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("train: augmentation ratios and probabilities must lie in [0, 1]");
  }
}

DatasetView split_view(const DatasetBundle& bundle, const GraphContext& graph, const Range& range,
                       const FeatureConfig& cfg, std::size_t context_length) {
  if (graph.nodes() != bundle.nodes()) {
    throw InputError("split_view: graph context has " + std::to_string(graph.nodes()) +
                     " nodes, dataset has " + std::to_string(bundle.nodes()));
  }
  const auto ends = window_end_range(range.begin, std::min(range.end, bundle.steps()), cfg, context_length);
  if (!ends) {
    throw DataError("dataset '" + bundle.name + "': steps [" + std::to_string(range.begin) + ", " +
                    std::to_string(range.end) + ") hold no complete window (need " +
                    std::to_string(min_history(cfg, context_length)) + " steps of history)");
  }
  return {&bundle, &graph, ends->first, ends->second};
}

// ---- Spectral augmentation -------------------------------------------------

namespace {

using Spectrum = std::vector<std::complex<double>>;

Spectrum forward_fft(std::span<const double> x) {
  Eigen::FFT<double> fft;
  std::vector<double> in(x.begin(), x.end());
  Spectrum out;
  fft.fwd(out, in);
  return out;
}

std::vector<double> inverse_fft(const Spectrum& spec, double* imag_residue) {
  Eigen::FFT<double> fft;
  Spectrum time;
  fft.inv(time, spec);
  std::vector<double> out(time.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < time.size(); ++i) {
    out[i] = time[i].real();
    worst = std::max(worst, std::abs(time[i].imag()));
  }
  if (imag_residue) *imag_residue = worst;
  return out;
}

std::size_t ceil_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

// `count` distinct values of [lo, hi), uniformly, by partial Fisher-Yates.
std::vector<std::size_t> choose_bins(std::size_t lo, std::size_t hi, std::size_t count, RngStream& s) {
  std::vector<std::size_t> pool(hi - lo);
  std::iota(pool.begin(), pool.end(), lo);
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + s.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

// Bin j and its conjugate partner n − j.
template <typename Fn>
void for_bin_pair(std::size_t n, std::size_t j, Fn&& fn) {
  fn(j);
  if (j != 0 && n - j != j) fn(n - j);
}

std::vector<double> apply_mask(std::span<const double> x, std::span<const std::size_t> bins,
                               double* imag_residue) {
  if (bins.empty()) {
    if (imag_residue) *imag_residue = 0.0;
    return {x.begin(), x.end()};
  }
  Spectrum spec = forward_fft(x);
  for (std::size_t j : bins) for_bin_pair(x.size(), j, [&](std::size_t k) { spec[k] = 0.0; });
  return inverse_fft(spec, imag_residue);
}

std::vector<double> apply_mix(std::span<const double> x, std::span<const double> y,
                              std::span<const std::size_t> bins, double* imag_residue) {
  if (bins.empty()) {
    if (imag_residue) *imag_residue = 0.0;
    return {x.begin(), x.end()};
  }
  Spectrum a = forward_fft(x);
  const Spectrum b = forward_fft(y);
  for (std::size_t j : bins) for_bin_pair(x.size(), j, [&](std::size_t k) { a[k] = b[k]; });
  return inverse_fft(a, imag_residue);
}

void check_window(std::size_t n, double ratio, const char* what) {
  if (n < 4) throw InputError(std::string(what) + ": window length must be >= 4, got " + std::to_string(n));
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw InputError(std::string(what) + ": ratio must lie in [0, 1]");
}

std::vector<std::size_t> mask_bins(std::size_t n, double ratio, RngStream& s) {
  const std::size_t bins = n / 2 + 1;
  return choose_bins(1, bins, ceil_count(ratio, bins - 1), s);
}

std::vector<std::size_t> mix_bins(std::size_t n, double ratio, RngStream& s) {
  const std::size_t bins = n / 2 + 1;
  return choose_bins(0, bins, ceil_count(ratio, bins), s);
}

}  // namespace

std::vector<double> freq_mask(std::span<const double> window, double ratio, RngStream& stream,
                              double* imag_residue) {
  check_window(window.size(), ratio, "freq_mask");
  return apply_mask(window, mask_bins(window.size(), ratio, stream), imag_residue);
}

std::vector<double> freq_mix(std::span<const double> w1, std::span<const double> w2, double ratio,
                             RngStream& stream, double* imag_residue) {
  if (w1.size() != w2.size()) {
    throw DimensionError("freq_mix: window lengths differ (" + std::to_string(w1.size()) + " vs " +
                         std::to_string(w2.size()) + ")");
  }
  check_window(w1.size(), ratio, "freq_mix");
  return apply_mix(w1, w2, mix_bins(w1.size(), ratio, stream), imag_residue);
}

// ---- Sampling --------------------------------------------------------------

WindowDraw draw_window(std::span<const DatasetView> views, RngStream& stream) {
  if (views.empty()) throw InputError("draw_window: no datasets");
  WindowDraw d;
  d.dataset = stream.below(views.size());
  const DatasetView& v = views[d.dataset];
  d.node = stream.below(v.bundle->nodes());
  d.window_end = v.first + stream.below(v.windows());
  return d;
}

namespace {

// Raw history of `nodes` over [begin, begin + len), nodes renumbered 0..m−1.
Series neighborhood_window(const Series& x, std::span<const std::size_t> nodes, std::size_t begin,
                           std::size_t len) {
  const std::size_t f = x.features();
  Series out(len, nodes.size(), f);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      for (std::size_t c = 0; c < f; ++c) out.at(t, j, c) = x.at(begin + t, nodes[j], c);
    }
  }
  return out;
}

std::vector<double> channel(const Series& s, std::size_t node, std::size_t f) {
  std::vector<double> out(s.steps());
  for (std::size_t t = 0; t < s.steps(); ++t) out[t] = s.at(t, node, f);
  return out;
}

void set_channel(Series& s, std::size_t node, std::size_t f, std::span<const double> v) {
  for (std::size_t t = 0; t < s.steps(); ++t) s.at(t, node, f) = v[t];
}

}  // namespace

Sample training_sample(const DatasetView& view, std::size_t node, std::size_t window_end,
                       const FeatureConfig& fc, std::size_t context_length, const TrainConfig& tc,
                       RngStream& aug) {
  const auto& nb = view.graph->neighborhoods.at(node);
  const std::size_t len = min_history(fc, context_length);
  if (window_end + 1 < len) throw InputError("training_sample: window end lacks history");
  const std::size_t begin = window_end + 1 - len;
  const Series& x = view.bundle->series;
  Series local = neighborhood_window(x, nb, begin, len);

  if (tc.augment) {
    if (aug.uniform() < tc.freq_mask_prob) {
      const auto bins = mask_bins(len, tc.freq_mask_ratio, aug);
      for (std::size_t j = 0; j < nb.size(); ++j) {
        for (std::size_t f = 0; f < x.features(); ++f) {
          set_channel(local, j, f, apply_mask(channel(local, j, f), bins, nullptr));
        }
      }
    }
    if (aug.uniform() < tc.freq_mix_prob) {
      const std::size_t partner_end = view.first + aug.below(view.windows());
      const Series partner = neighborhood_window(x, nb, partner_end + 1 - len, len);
      const auto bins = mix_bins(len, tc.freq_mix_ratio, aug);
      for (std::size_t j = 0; j < nb.size(); ++j) {
        for (std::size_t f = 0; f < x.features(); ++f) {
          set_channel(local, j, f, apply_mix(channel(local, j, f), channel(partner, j, f), bins, nullptr));
        }
      }
    }
  }

  std::vector<std::size_t> ids(nb.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto ts = std::span<const Timestamp>(view.bundle->timestamps).subspan(begin, len);
  Sample s = make_sample(local, ts, ids, view.graph->pe.row(node), len - 1, context_length, fc);
  s.node = node;
  s.window_end = window_end;
  return s;
}

std::vector<Sample> evaluation_samples(const DatasetView& view, const FeatureConfig& fc,
                                       std::size_t context_length, std::size_t stride,
                                       std::size_t limit) {
  if (stride == 0) throw InputError("evaluation_samples: stride must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t n = 0; n < view.bundle->nodes(); ++n) {
    for (std::size_t t = view.first; t <= view.last; t += stride) picks.emplace_back(n, t);
  }
  if (limit > 0 && picks.size() > limit) {
    std::vector<std::pair<std::size_t, std::size_t>> thin(limit);
    for (std::size_t i = 0; i < limit; ++i) thin[i] = picks[i * picks.size() / limit];
    picks = std::move(thin);
  }
  std::vector<Sample> out;
  out.reserve(picks.size());
  for (const auto& [n, t] : picks) {
    out.push_back(make_sample(view.bundle->series, view.bundle->timestamps,
                              view.graph->neighborhoods[n], view.graph->pe.row(n), t,
                              context_length, fc));
  }
  return out;
}

// ---- Training loop ---------------------------------------------------------

namespace {

std::vector<Sample> pooled_samples(std::span<const DatasetView> views, const FeatureConfig& fc,
                                   std::size_t context_length, std::size_t limit) {
  std::vector<Sample> out;
  const std::size_t per = limit == 0 ? 0 : (limit + views.size() - 1) / views.size();
  for (const auto& v : views) {
    auto s = evaluation_samples(v, fc, context_length, context_length, per);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  return out;
}

void log_epoch(std::ostream* log, const EpochRecord& r) {
  if (!log) return;
  for (const auto& [split, nll] : {std::pair{"train", r.train_nll}, {"val", r.val_nll}}) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["split"] = split;
    j["nll"] = nll;
    j["wall_seconds"] = r.wall_seconds;
    *log << j.dump() << '\n';
  }
  log->flush();
}

}  // namespace

TrainResult train_model(ModelParams<float> params, std::span<const DatasetView> train,
                        std::span<const DatasetView> val, const FeatureConfig& fc,
                        const TrainConfig& tc, const TrainableFilter& trainable, std::ostream* log) {
  tc.validate();
  if (train.empty()) throw InputError("train_model: no training data");
  if (val.empty()) throw InputError("train_model: no validation data");
  const std::size_t ctx = params.config.context_length;
  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  };

  std::vector<Tensor<float>*> tensors;
  std::vector<bool> trains, decays;
  for_each_param(params, [&](const std::string& name, Tensor<float>& t, ParamRole role) {
    tensors.push_back(&t);
    trains.push_back(!trainable || trainable(name));
    decays.push_back(role == ParamRole::weight || role == ParamRole::adapter);
  });

  const std::vector<Sample> probe = pooled_samples(train, fc, ctx, tc.eval_windows);
  const std::vector<Sample> held = pooled_samples(val, fc, ctx, tc.eval_windows);

  TrainResult result;
  TrainReport& report = result.report;
  auto evaluate = [&](std::size_t epoch, double batch_loss) {
    EpochRecord r;
    r.epoch = epoch;
    r.train_nll = mean_nll(params, std::span<const Sample>(probe));
    r.val_nll = mean_nll(params, std::span<const Sample>(held));
    r.batch_nll = batch_loss;
    r.wall_seconds = elapsed();
    report.epochs.push_back(r);
    log_epoch(log, r);
    if (!std::isfinite(r.val_nll)) throw NumericError("non-finite validation NLL at epoch " + std::to_string(epoch));
    if (r.val_nll < report.best_val_nll) {
      report.best_val_nll = r.val_nll;
      report.best_epoch = epoch;
      result.params = params;
    }
  };

  RngStream sampler(tc.seed, 1);
  RngStream aug(tc.seed, 2);
  AdamState<float> state;
  try {
    evaluate(0, std::numeric_limits<double>::quiet_NaN());
    std::vector<Sample> samples(tc.batch_size);
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
      double loss_sum = 0.0;
      for (std::size_t step = 0; step < tc.batches_per_epoch; ++step) {
        for (auto& s : samples) {
          const WindowDraw d = draw_window(train, sampler);
          s = training_sample(train[d.dataset], d.node, d.window_end, fc, ctx, tc, aug);
        }
        const Batch<float> batch =
            make_batch<float>(samples, (epoch - 1) * tc.batches_per_epoch + step);

        Tape<float> tape;
        std::vector<Var<float>> flat;
        flat.reserve(tensors.size());
        for (std::size_t i = 0; i < tensors.size(); ++i) flat.push_back(tape.bind(*tensors[i], trains[i]));
        const ModelVars<float> mv = assemble_vars(params, std::span<const Var<float>>(flat));
        const Var<float> loss = batch_nll(params, mv, tape, batch);
        loss_sum += loss.value()[0];
        tape.backward(loss);

        std::vector<Tensor<float>> grads;
        std::vector<AdamTarget<float>> targets;
        double sq = 0.0;
        for (std::size_t i = 0; i < tensors.size(); ++i) {
          if (!trains[i]) continue;
          grads.push_back(tape.grad_or_zero(flat[i]));
          for (float g : grads.back().data()) sq += static_cast<double>(g) * g;
        }
        if (!std::isfinite(sq)) {
          throw NumericError("non-finite gradient in batch " + std::to_string(batch.id));
        }
        const double norm = std::sqrt(sq);
        if (tc.clip_norm > 0.0 && norm > tc.clip_norm) {
          const auto f = static_cast<float>(tc.clip_norm / norm);
          for (auto& g : grads) {
            for (float& v : g.data()) v *= f;
          }
        }
        for (std::size_t i = 0, k = 0; i < tensors.size(); ++i) {
          if (trains[i]) targets.push_back({tensors[i], &grads[k++], decays[i]});
        }
        adam_step<float>(targets, state, tc);
      }
      evaluate(epoch, loss_sum / static_cast<double>(tc.batches_per_epoch));
    }
  } catch (const NumericError& e) {
    report.failure = e.what();
  }
  if (report.epochs.empty()) result.params = params;
  result.final_params = std::move(params);
  return result;
}

TrainResult pretrain(std::span<const DatasetBundle> datasets, ModelConfig mc, const FeatureConfig& fc,
                     const TrainConfig& tc, std::ostream* log) {
  fc.validate();
  tc.validate();
  if (datasets.empty()) throw InputError("pretrain: no datasets");
  if (mc.token_dim == 0) mc.token_dim = fc.token_dim();
  if (mc.token_dim != fc.token_dim()) {
    throw ConfigError("pretrain: model token_dim " + std::to_string(mc.token_dim) +
                      " does not match the feature layout (" + std::to_string(fc.token_dim()) + ")");
  }
  const std::size_t features = datasets.front().series.features();
  std::vector<GraphContext> graphs;
  graphs.reserve(datasets.size());
  std::vector<DatasetView> train, val;
  for (const auto& d : datasets) {
    if (d.series.features() != fc.num_features || d.series.features() != features) {
      throw ConfigError("pretrain: dataset '" + d.name + "' has " + std::to_string(d.series.features()) +
                        " features, configuration expects " + std::to_string(fc.num_features));
    }
    if (d.splits.train.size() == 0 || d.splits.val.size() == 0) {
      throw DataError("pretrain: dataset '" + d.name + "' has no train/validation split");
    }
    graphs.push_back(prepare_graph(d.graph, fc));
  }
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    train.push_back(split_view(datasets[i], graphs[i], datasets[i].splits.train, fc, mc.context_length));
    val.push_back(split_view(datasets[i], graphs[i], datasets[i].splits.val, fc, mc.context_length));
  }
  RngStream init(tc.seed, 0);
  return train_model(init_model<float>(mc, init), train, val, fc, tc, {}, log);
}

}  // namespace strada
