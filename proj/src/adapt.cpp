#include "strada/adapt.hpp"

#include <cmath>

namespace strada {

std::string_view to_string(AdaptMethod method) {
  switch (method) {
    case AdaptMethod::lora: return "lora";
    case AdaptMethod::topk: return "topk";
    case AdaptMethod::full: return "full";
  }
  return "lora";
}

AdaptMethod parse_adapt_method(std::string_view text) {
  if (text == "lora") return AdaptMethod::lora;
  if (text == "topk") return AdaptMethod::topk;
  if (text == "full") return AdaptMethod::full;
  throw ConfigError("unknown adaptation method '" + std::string(text) + "' (expected lora, topk or full)");
}

void AdaptPlan::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("adapt: fraction must lie in (0, 1]");
  if (method == AdaptMethod::lora && rank == 0) throw ConfigError("adapt: rank must be >= 1");
  if (method == AdaptMethod::topk && k_layers == 0) throw ConfigError("adapt: k_layers must be >= 1");
  if (!std::isfinite(lora_scale)) throw ConfigError("adapt: lora_scale must be finite");
}

namespace {

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_head(const std::string& name) { return starts_with(name, "head."); }

}  // namespace

TrainableFilter plan_trainables(const ModelParams<float>& p, const AdaptPlan& plan) {
  plan.validate();
  switch (plan.method) {
    case AdaptMethod::full:
      return [](const std::string&) { return true; };
    case AdaptMethod::lora:
      if (!p.has_lora()) throw ConfigError("plan_trainables: lora plan on a model without adapters");
      return [](const std::string& name) {
        return is_head(name) || ends_with(name, ".lora_a") || ends_with(name, ".lora_b");
      };
    case AdaptMethod::topk: {
      const std::size_t n = p.layers.size();
      if (plan.k_layers > n) {
        throw ConfigError("plan_trainables: k_layers " + std::to_string(plan.k_layers) + " exceeds the " +
                          std::to_string(n) + " layers of the model");
      }
      std::vector<std::string> prefixes;
      for (std::size_t i = n - plan.k_layers; i < n; ++i) prefixes.push_back(param_names::layer(i, ""));
      return [prefixes](const std::string& name) {
        if (is_head(name) || name == param_names::kFinalNorm) return true;
        for (const auto& pre : prefixes) {
          if (starts_with(name, pre)) return true;
        }
        return false;
      };
    }
  }
  throw ConfigError("plan_trainables: unknown method");
}

DatasetView few_shot_subset(const DatasetView& train, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("few_shot_subset: fraction must lie in (0, 1]");
  const auto n = static_cast<double>(train.windows());
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * n - 1e-9));
  if (keep == 0) throw InputError("few_shot_subset: fraction keeps no training window");
  DatasetView out = train;
  out.last = train.first + keep - 1;
  return out;
}

AdaptResult adapt_model(const ModelParams<float>& base, const FeatureConfig& fc, const DatasetBundle& target,
                        const AdaptPlan& plan, const TrainConfig& tc, const FeatureConfig* requested,
                        std::ostream* log) {
  plan.validate();
  tc.validate();
  if (requested) {
    std::string fields;
    for (const auto& d : fc.layout_differences(*requested)) fields += (fields.empty() ? "" : ", ") + d;
    if (!fields.empty()) throw ConfigError("adapt: checkpoint token layout differs in: " + fields);
  }
  if (base.config.token_dim != fc.token_dim()) {
    throw ConfigError("adapt: model token_dim " + std::to_string(base.config.token_dim) +
                      " does not match the feature layout (" + std::to_string(fc.token_dim()) + ")");
  }
  if (target.series.features() != fc.num_features) {
    throw ConfigError("adapt: target has " + std::to_string(target.series.features()) +
                      " features, model expects " + std::to_string(fc.num_features));
  }
  if (target.splits.train.size() == 0 || target.splits.val.size() == 0) {
    throw DataError("adapt: target '" + target.name + "' has no train/validation split");
  }
  ModelParams<float> start = base;
  if (plan.method == AdaptMethod::lora) {
    if (start.has_lora()) start = merge_lora(std::move(start));
    RngStream init(tc.seed, 3);
    start = attach_lora(std::move(start), plan.rank, init, plan.lora_scale);
  }
  const TrainableFilter trainable = plan_trainables(start, plan);

  const GraphContext graph = prepare_graph(target.graph, fc);
  const std::size_t ctx = base.config.context_length;
  const DatasetView full = split_view(target, graph, target.splits.train, fc, ctx);
  const std::vector<DatasetView> train{few_shot_subset(full, plan.fraction)};
  const std::vector<DatasetView> val{split_view(target, graph, target.splits.val, fc, ctx)};

  AdaptResult out;
  out.report.plan = plan;
  out.report.total_parameters = count_parameters(start);
  out.report.trainable_parameters = count_parameters(start, trainable);
  out.report.train_windows = train.front().windows();
  TrainResult r = train_model(std::move(start), train, val, fc, tc, trainable, log);
  if (r.report.epochs.empty()) throw NumericError("adapt: " + r.report.failure);
  out.report.val_nll_before = r.report.epochs.front().val_nll;
  out.report.val_nll_after = r.report.best_val_nll;
  out.report.train = std::move(r.report);
  out.params = std::move(r.params);
  return out;
}

}  // namespace strada
