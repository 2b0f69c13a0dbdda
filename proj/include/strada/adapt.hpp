#pragma once

// Domain adaptation: low-rank adapters on the attention projections, last-k
// layer tuning, full tuning, and few-shot subsets of the target data.

#include <iosfwd>
#include <string>
#include <string_view>

#include "strada/error.hpp"
#include "strada/model.hpp"
#include "strada/rng.hpp"
#include "strada/train.hpp"

namespace strada {

enum class AdaptMethod { lora, topk, full };

std::string_view to_string(AdaptMethod method);
AdaptMethod parse_adapt_method(std::string_view text);

struct AdaptPlan {
  AdaptMethod method = AdaptMethod::lora;
  std::size_t rank = 4;
  std::size_t k_layers = 1;
  double fraction = 1.0;  // share of the target train windows
  double lora_scale = 1.0;

  void validate() const;
  friend bool operator==(const AdaptPlan&, const AdaptPlan&) = default;
};

inline constexpr double kLoraInitStd = 0.02;

// Adds a rank-r adapter (A ~ N(0, 0.02²), B = 0) to W_q, W_k and W_v of every
// layer. Requires 1 ≤ r < min(d, k).
template <typename T>
ModelParams<T> attach_lora(ModelParams<T> p, std::size_t rank, RngStream& stream, double scale = 1.0) {
  const std::size_t d = p.config.d_model;
  if (rank == 0 || rank >= d) {
    throw ConfigError("attach_lora: rank " + std::to_string(rank) + " must satisfy 1 <= r < min(d, k) = " +
                      std::to_string(d));
  }
  if (p.has_lora()) throw ConfigError("attach_lora: model already carries adapters");
  for (auto& layer : p.layers) {
    for (std::size_t k = 0; k < 3; ++k) {
      const Tensor<T>& w = layer.projection(static_cast<Projection>(k));
      LoraAdapter<T> a{Tensor<T>({rank, w.dim(1)}), Tensor<T>({w.dim(0), rank})};
      for (auto& x : a.a.data()) x = static_cast<T>(kLoraInitStd * stream.normal());
      layer.lora[k] = std::move(a);
    }
  }
  p.lora_scale = static_cast<T>(scale);
  return p;
}

// W ← W + scale·B·A for every adapter, which is then dropped.
template <typename T>
ModelParams<T> merge_lora(ModelParams<T> p) {
  if (!p.has_lora()) throw ConfigError("merge_lora: no adapters attached (already merged?)");
  for (auto& layer : p.layers) {
    for (std::size_t k = 0; k < 3; ++k) {
      auto& a = layer.lora[k];
      if (!a) continue;
      layer.projection(static_cast<Projection>(k)).mat().noalias() += p.lora_scale * (a->b.mat() * a->a.mat());
      a.reset();
    }
  }
  p.lora_scale = T{1};
  return p;
}

// Name filter of the tensors the plan trains.
TrainableFilter plan_trainables(const ModelParams<float>& p, const AdaptPlan& plan);

// The chronologically first ⌈p·windows⌉ window ends of `train`.
DatasetView few_shot_subset(const DatasetView& train, double fraction);

struct AdaptReport {
  AdaptPlan plan;
  std::size_t trainable_parameters = 0;
  std::size_t total_parameters = 0;
  std::size_t train_windows = 0;  // per node, after sub-setting
  double val_nll_before = 0.0;
  double val_nll_after = 0.0;
  TrainReport train;
};

struct AdaptResult {
  ModelParams<float> params;  // adapters kept separate for lora
  AdaptReport report;
};

// Fine-tunes `base` (featurized with `fc`) on the few-shot subset of the
// target's train split and keeps the parameters with the best target
// validation NLL. Adapter initialization uses stream 3 of the train seed.
// `requested`, when given, must share the token layout of `fc`.
AdaptResult adapt_model(const ModelParams<float>& base, const FeatureConfig& fc, const DatasetBundle& target,
                        const AdaptPlan& plan, const TrainConfig& tc, const FeatureConfig* requested = nullptr,
                        std::ostream* log = nullptr);

}  // namespace strada
