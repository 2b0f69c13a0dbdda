#include "strada/config.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "strada/datahub.hpp"
#include "strada/error.hpp"
#include "strada/textio.hpp"

namespace strada {

using json = nlohmann::ordered_json;

namespace {

class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
    obj_ = &doc;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = obj_->find(key);
    if (it == obj_->end()) return;
    read(*it, key, out);
  }

  void finish() const {
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  [[noreturn]] void bad(const std::string& key, const char* what) const {
    throw ConfigError("config: '" + name_ + "." + key + "' must be " + what);
  }
  void read(const json& v, const std::string& key, std::size_t& out) const {
    if (!v.is_number_unsigned()) bad(key, "a nonnegative integer");
    out = v.get<std::size_t>();
  }
  void read(const json& v, const std::string& key, double& out) const {
    if (!v.is_number()) bad(key, "a number");
    out = v.get<double>();
  }
  void read(const json& v, const std::string& key, bool& out) const {
    if (!v.is_boolean()) bad(key, "true or false");
    out = v.get<bool>();
  }
  void read(const json& v, const std::string& key, std::string& out) const {
    if (!v.is_string()) bad(key, "a string");
    out = v.get<std::string>();
  }
  template <typename T>
  void read(const json& v, const std::string& key, std::vector<T>& out) const {
    if (!v.is_array()) bad(key, "an array");
    std::vector<T> items(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], key + "[" + std::to_string(i) + "]", items[i]);
    out = std::move(items);
  }

  const json* obj_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

const json& section_of(const json& doc, const char* name) {
  static const json empty = json::object();
  const auto it = doc.find(name);
  return it == doc.end() ? empty : *it;
}

json model_json(const ModelConfig& m) {
  json j;
  j["token_dim"] = m.token_dim;
  j["d_model"] = m.d_model;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["head_dim"] = m.head_dim;
  j["ffn_dim"] = m.ffn_dim;
  j["context_length"] = m.context_length;
  j["rope_base"] = m.rope_base;
  j["rmsnorm_eps"] = m.rmsnorm_eps;
  j["finite_variance"] = m.finite_variance;
  return j;
}

void read_model(Section& s, ModelConfig& m) {
  s.get("token_dim", m.token_dim);
  s.get("d_model", m.d_model);
  s.get("n_layers", m.n_layers);
  s.get("n_heads", m.n_heads);
  s.get("head_dim", m.head_dim);
  s.get("ffn_dim", m.ffn_dim);
  s.get("context_length", m.context_length);
  s.get("rope_base", m.rope_base);
  s.get("rmsnorm_eps", m.rmsnorm_eps);
  s.get("finite_variance", m.finite_variance);
}

json features_json(const FeatureConfig& f) {
  json j;
  j["lags"] = std::vector<std::size_t>(f.lags.indices().begin(), f.lags.indices().end());
  j["hops"] = f.hops.k;
  j["max_neighbors"] = f.hops.max_neighbors;
  std::vector<std::string> dt;
  for (auto field : f.datetime) dt.emplace_back(to_string(field));
  j["datetime"] = dt;
  j["k_pe"] = f.k_pe;
  j["num_features"] = f.num_features;
  j["scale_floor"] = f.scale_floor;
  return j;
}

void read_features(Section& s, FeatureConfig& f) {
  std::vector<std::size_t> lags(f.lags.indices().begin(), f.lags.indices().end());
  s.get("lags", lags);
  f.lags = LagSet(std::move(lags));
  s.get("hops", f.hops.k);
  s.get("max_neighbors", f.hops.max_neighbors);
  std::vector<std::string> dt;
  for (auto field : f.datetime) dt.emplace_back(to_string(field));
  s.get("datetime", dt);
  f.datetime.clear();
  for (const auto& name : dt) f.datetime.push_back(parse_datetime_field(name));
  s.get("k_pe", f.k_pe);
  s.get("num_features", f.num_features);
  s.get("scale_floor", f.scale_floor);
}

json train_json(const TrainConfig& t) {
  json j;
  j["learning_rate"] = t.learning_rate;
  j["weight_decay"] = t.weight_decay;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["batches_per_epoch"] = t.batches_per_epoch;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["clip_norm"] = t.clip_norm;
  j["augment"] = t.augment;
  j["freq_mask_ratio"] = t.freq_mask_ratio;
  j["freq_mix_ratio"] = t.freq_mix_ratio;
  j["freq_mask_prob"] = t.freq_mask_prob;
  j["freq_mix_prob"] = t.freq_mix_prob;
  j["eval_windows"] = t.eval_windows;
  j["seed"] = t.seed;
  return j;
}

void read_train(Section& s, TrainConfig& t) {
  s.get("learning_rate", t.learning_rate);
  s.get("weight_decay", t.weight_decay);
  s.get("batch_size", t.batch_size);
  s.get("epochs", t.epochs);
  s.get("batches_per_epoch", t.batches_per_epoch);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("adam_eps", t.adam_eps);
  s.get("clip_norm", t.clip_norm);
  s.get("augment", t.augment);
  s.get("freq_mask_ratio", t.freq_mask_ratio);
  s.get("freq_mix_ratio", t.freq_mix_ratio);
  s.get("freq_mask_prob", t.freq_mask_prob);
  s.get("freq_mix_prob", t.freq_mix_prob);
  s.get("eval_windows", t.eval_windows);
  std::size_t seed = t.seed;
  s.get("seed", seed);
  t.seed = seed;
}

json adapt_json(const AdaptPlan& a) {
  json j;
  j["method"] = std::string(to_string(a.method));
  j["rank"] = a.rank;
  j["k_layers"] = a.k_layers;
  j["fraction"] = a.fraction;
  j["lora_scale"] = a.lora_scale;
  return j;
}

void read_adapt(Section& s, AdaptPlan& a) {
  std::string method(to_string(a.method));
  s.get("method", method);
  a.method = parse_adapt_method(method);
  s.get("rank", a.rank);
  s.get("k_layers", a.k_layers);
  s.get("fraction", a.fraction);
  s.get("lora_scale", a.lora_scale);
}

json rollout_json(const RolloutConfig& r) {
  json j;
  j["horizon"] = r.horizon;
  j["n_samples"] = r.n_samples;
  j["mode"] = std::string(to_string(r.mode));
  j["seed"] = r.seed;
  return j;
}

void read_rollout(Section& s, RolloutConfig& r) {
  s.get("horizon", r.horizon);
  s.get("n_samples", r.n_samples);
  std::string mode(to_string(r.mode));
  s.get("mode", mode);
  r.mode = parse_rollout_mode(mode);
  std::size_t seed = r.seed;
  s.get("seed", seed);
  r.seed = seed;
}

json eval_json(const EvalConfig& e) {
  json j;
  j["horizons"] = e.horizons;
  j["n_samples"] = e.n_samples;
  j["mode"] = std::string(to_string(e.mode));
  j["max_origins"] = e.max_origins;
  j["nll_windows"] = e.nll_windows;
  j["mape_floor"] = e.mape_floor;
  j["sigmas"] = e.sigmas;
  j["normalize_noise"] = e.normalize_noise;
  j["coverage_level"] = e.coverage_level;
  j["seed"] = e.seed;
  return j;
}

void read_eval(Section& s, EvalConfig& e) {
  s.get("horizons", e.horizons);
  s.get("n_samples", e.n_samples);
  std::string mode(to_string(e.mode));
  s.get("mode", mode);
  e.mode = parse_rollout_mode(mode);
  s.get("max_origins", e.max_origins);
  s.get("nll_windows", e.nll_windows);
  s.get("mape_floor", e.mape_floor);
  s.get("sigmas", e.sigmas);
  s.get("normalize_noise", e.normalize_noise);
  s.get("coverage_level", e.coverage_level);
  std::size_t seed = e.seed;
  s.get("seed", seed);
  e.seed = seed;
}

json parse_document(const std::string& text, const std::string& what) {
  try {
    json doc = json::parse(text);
    if (!doc.is_object()) throw ConfigError(what + ": top level must be an object");
    return doc;
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

template <typename Fn>
void read_section(const json& doc, const char* name, Fn&& fn) {
  Section s(section_of(doc, name), name);
  fn(s);
  s.finish();
}

void reject_unknown_sections(const json& doc, std::initializer_list<const char*> names) {
  for (const auto& [key, value] : doc.items()) {
    bool known = false;
    for (const char* n : names) known = known || key == n;
    if (!known) throw ConfigError("config: unknown section '" + key + "'");
  }
}

}  // namespace

void RunConfig::validate() const {
  features.validate();
  ModelConfig m = model;
  if (m.token_dim == 0) m.token_dim = features.token_dim();
  if (m.token_dim != features.token_dim()) {
    throw ConfigError("config: model.token_dim " + std::to_string(m.token_dim) + " does not match the feature layout (" +
                      std::to_string(features.token_dim()) + ")");
  }
  m.validate();
  train.validate();
  adapt.validate();
  rollout.validate();
  eval.validate();
}

RunConfig parse_run_config(const std::string& text) {
  const json doc = parse_document(text, "config");
  reject_unknown_sections(doc, {"model", "features", "train", "adapt", "rollout", "eval"});
  RunConfig c;
  try {
    read_section(doc, "model", [&](Section& s) { read_model(s, c.model); });
    read_section(doc, "features", [&](Section& s) { read_features(s, c.features); });
    read_section(doc, "train", [&](Section& s) { read_train(s, c.train); });
    read_section(doc, "adapt", [&](Section& s) { read_adapt(s, c.adapt); });
    read_section(doc, "rollout", [&](Section& s) { read_rollout(s, c.rollout); });
    read_section(doc, "eval", [&](Section& s) { read_eval(s, c.eval); });
  } catch (const ConfigError&) {
    throw;
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string canonical_config(const RunConfig& c) {
  json j;
  ModelConfig m = c.model;
  if (m.token_dim == 0) m.token_dim = c.features.token_dim();
  j["model"] = model_json(m);
  j["features"] = features_json(c.features);
  j["train"] = train_json(c.train);
  j["adapt"] = adapt_json(c.adapt);
  j["rollout"] = rollout_json(c.rollout);
  j["eval"] = eval_json(c.eval);
  return j.dump(2) + "\n";
}

void override_seeds(RunConfig& cfg, std::uint64_t seed) {
  cfg.train.seed = seed;
  cfg.rollout.seed = seed;
  cfg.eval.seed = seed;
}

bool apply_seed_env(RunConfig& cfg) {
  const char* env = std::getenv("STRADA_SEED");
  if (!env || !*env) return false;
  std::size_t seed = 0;
  if (!text::parse_size(env, seed)) throw ConfigError("STRADA_SEED must be a nonnegative integer, got '" + std::string(env) + "'");
  override_seeds(cfg, seed);
  return true;
}

// ---- Model checkpoints ----------------------------------------------------

void save_model(const std::filesystem::path& path, const ModelParams<float>& params, const FeatureConfig& fc,
                const TrainConfig& tc) {
  json j;
  json m = model_json(params.config);
  m["lora_scale"] = static_cast<double>(params.lora_scale);
  j["model"] = std::move(m);
  j["features"] = features_json(fc);
  j["train"] = train_json(tc);
  CheckpointData data;
  data.config = j.dump(2) + "\n";
  for_each_param(params, [&](const std::string& name, const Tensor<float>& t, ParamRole role) {
    (role == ParamRole::adapter ? data.adapters : data.tensors).push_back({name, t});
  });
  save_checkpoint(data, path);
}

namespace {

// "layers.<i>.<wq|wk|wv>.lora_<a|b>" → (layer, projection).
std::pair<std::size_t, std::size_t> adapter_slot(const std::string& name, std::size_t layers) {
  const auto parts = text::split(name, '.');
  std::size_t layer = 0;
  if (parts.size() == 4 && parts[0] == "layers" && text::parse_size(parts[1], layer) && layer < layers &&
      (parts[3] == "lora_a" || parts[3] == "lora_b")) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (parts[2] == kProjectionNames[k]) return {layer, k};
    }
  }
  throw IntegrityError("checkpoint: unexpected adapter tensor '" + name + "'");
}

}  // namespace

SavedModel load_model(const std::filesystem::path& path) {
  CheckpointData data = load_checkpoint(path);
  const json doc = parse_document(data.config, path.string() + ": checkpoint config");
  SavedModel out;
  ModelConfig mc;
  double lora_scale = 1.0;
  try {
    reject_unknown_sections(doc, {"model", "features", "train"});
    read_section(doc, "model", [&](Section& s) {
      read_model(s, mc);
      s.get("lora_scale", lora_scale);
    });
    read_section(doc, "features", [&](Section& s) { read_features(s, out.features); });
    read_section(doc, "train", [&](Section& s) { read_train(s, out.train); });
    mc.validate();
    out.features.validate();
  } catch (const InputError& e) {
    throw ConfigError(path.string() + ": checkpoint config: " + e.what());
  }
  if (mc.token_dim != out.features.token_dim()) {
    throw ConfigError(path.string() + ": checkpoint token_dim does not match its feature layout");
  }
  RngStream unused(0, 0);
  ModelParams<float> p = init_model<float>(mc, unused);
  p.lora_scale = static_cast<float>(lora_scale);
  for (const auto& t : data.adapters) {
    const auto [layer, k] = adapter_slot(t.name, p.layers.size());
    if (!p.layers[layer].lora[k]) p.layers[layer].lora[k].emplace();
  }
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto* group : {&data.tensors, &data.adapters}) {
    for (const auto& t : *group) {
      if (!stored.emplace(t.name, &t.tensor).second) {
        throw IntegrityError("checkpoint: duplicate tensor '" + t.name + "'");
      }
    }
  }
  std::size_t used = 0;
  for_each_param(p, [&](const std::string& name, Tensor<float>& t, ParamRole role) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw IntegrityError("checkpoint: missing tensor '" + name + "'");
    if (role != ParamRole::adapter && it->second->shape() != t.shape()) {
      throw IntegrityError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                           ", config implies " + shape_str(t.shape()));
    }
    t = *it->second;
    ++used;
  });
  if (used != stored.size()) throw IntegrityError("checkpoint: holds tensors the model does not use");
  for (const auto& layer : p.layers) {
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& a = layer.lora[k];
      if (!a) continue;
      const Tensor<float>& w = layer.projection(static_cast<Projection>(k));
      if (a->a.rank() != 2 || a->b.rank() != 2 || a->a.dim(1) != w.dim(1) || a->b.dim(0) != w.dim(0) ||
          a->a.dim(0) != a->b.dim(1)) {
        throw IntegrityError("checkpoint: adapter shapes do not fit their projection");
      }
    }
  }
  out.params = std::move(p);
  out.config_text = std::move(data.config);
  return out;
}

void check_compatible(const FeatureConfig& checkpoint, const FeatureConfig& requested) {
  const auto diff = checkpoint.layout_differences(requested);
  if (diff.empty()) return;
  std::string fields;
  for (const auto& d : diff) fields += (fields.empty() ? "" : ", ") + d;
  throw CompatibilityError("checkpoint token layout differs from the requested configuration in: " + fields);
}

}  // namespace strada
