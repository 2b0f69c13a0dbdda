#pragma once

// Run configuration documents and model checkpoints.

#include <filesystem>
#include <optional>
#include <string>

#include "strada/adapt.hpp"
#include "strada/evalkit.hpp"
#include "strada/features.hpp"
#include "strada/infer.hpp"
#include "strada/model.hpp"
#include "strada/train.hpp"

namespace strada {

// Sections model, features, train, adapt, rollout, eval. Missing keys keep
// their defaults; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;  // token_dim 0 means "derive from the features"
  FeatureConfig features;
  TrainConfig train;
  AdaptPlan adapt;
  RolloutConfig rollout;
  EvalConfig eval;

  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
// Every key with its resolved value, in a fixed order.
std::string canonical_config(const RunConfig& cfg);

// Sets every seed in the config (train, rollout, eval).
void override_seeds(RunConfig& cfg, std::uint64_t seed);
// Applies STRADA_SEED when it is set; returns whether it was.
bool apply_seed_env(RunConfig& cfg);

// ---- Model checkpoints ----------------------------------------------------

struct SavedModel {
  ModelParams<float> params;
  FeatureConfig features;
  TrainConfig train;
  std::string config_text;
};

// Config document: model (with token_dim and lora_scale), features and
// train sections. Adapters go to the adapter section.
void save_model(const std::filesystem::path& path, const ModelParams<float>& params, const FeatureConfig& fc,
                const TrainConfig& tc);
SavedModel load_model(const std::filesystem::path& path);

// CompatibilityError naming every token-layout field that differs.
void check_compatible(const FeatureConfig& checkpoint, const FeatureConfig& requested);

}  // namespace strada
