#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "strada/adapt.hpp"
#include "strada/config.hpp"
#include "strada/datahub.hpp"
#include "strada/error.hpp"
#include "strada/evalkit.hpp"
#include "strada/infer.hpp"
#include "strada/textio.hpp"
#include "strada/train.hpp"

namespace fs = std::filesystem;
using namespace strada;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration (JSON); defaults apply to missing keys");
  cmd->add_option("--jobs", c.jobs, "Worker threads for sampling; results do not depend on it")
      ->check(CLI::PositiveNumber);
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  apply_seed_env(cfg);
  return cfg;
}

void log_config(const RunConfig& cfg) {
  std::cerr << "config " << nlohmann::ordered_json::parse(canonical_config(cfg)).dump() << '\n';
}

DatasetBundle load_data(const std::string& path) {
  const fs::path p(path);
  if (!fs::is_directory(p)) {
    throw DataError(path + ": expected a dataset directory holding series.csv and edges.csv");
  }
  DatasetBundle b = load_dataset_dir(p);
  if (!fs::exists(p / "manifest.json")) b.name = fs::absolute(p).lexically_normal().filename().string();
  if (b.name.empty()) b.name = "dataset";
  return b;
}

SavedModel load_checked(const std::string& path, const Common& common, const RunConfig& cfg) {
  SavedModel m = load_model(path);
  if (!common.config.empty()) check_compatible(m.features, cfg.features);
  return m;
}

Range split_range(const DatasetBundle& d, const std::string& name) {
  if (name == "train") return d.splits.train;
  if (name == "val") return d.splits.val;
  if (name == "test") return d.splits.test;
  throw InputError("unknown split '" + name + "' (expected train, val or test)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::ofstream open_log(const std::string& out, const RunConfig& cfg) {
  std::ofstream log(out + ".log.jsonl", std::ios::binary);
  if (!log) throw DataError("cannot write " + out + ".log.jsonl");
  nlohmann::ordered_json head;
  head["config"] = nlohmann::ordered_json::parse(canonical_config(cfg));
  log << head.dump() << '\n';
  return log;
}

std::string train_summary(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["epochs"] = r.epochs.empty() ? 0 : r.epochs.back().epoch;
  j["best_epoch"] = r.best_epoch;
  j["best_val_nll"] = r.best_val_nll;
  if (r.failed()) j["failure"] = r.failure;
  return j.dump();
}

// ---- gen-synth ---------------------------------------------------------------

struct GenSynthArgs {
  std::uint64_t seed = 0;
  std::size_t nodes = 12;
  std::size_t steps = 4000;
  std::string out;
  SynthParams params;
};

int run_gen_synth(const GenSynthArgs& a) {
  DatasetBundle b = synth_generate(a.seed, a.nodes, a.steps, a.params);
  b.name = "synth-" + std::to_string(a.seed);
  nlohmann::ordered_json extra;
  extra["generator"] = {{"seed", a.seed},          {"alpha", a.params.alpha},
                        {"beta", a.params.beta},   {"amplitude", a.params.amplitude},
                        {"period", a.params.period}, {"noise_nu", a.params.noise_nu},
                        {"noise_sigma", a.params.noise_sigma}};
  save_dataset_dir(b, a.out, extra.dump());
  std::cout << "wrote " << a.out << " (" << b.nodes() << " nodes, " << b.steps() << " steps)\n";
  return kOk;
}

// ---- pretrain ----------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::vector<std::string> data;
  std::string out;
};

int run_pretrain(const PretrainArgs& a) {
  const RunConfig cfg = resolve_config(a.common);
  log_config(cfg);
  std::vector<DatasetBundle> sets;
  for (const auto& d : a.data) sets.push_back(load_data(d));
  std::ofstream log = open_log(a.out, cfg);
  const TrainResult r = pretrain(sets, cfg.model, cfg.features, cfg.train, &log);
  save_model(a.out, r.params, cfg.features, cfg.train);
  std::cout << train_summary(r.report) << '\n';
  if (r.report.failed()) {
    std::cerr << "error: " << r.report.failure << " (best checkpoint saved)\n";
    return kNumeric;
  }
  return kOk;
}

// ---- adapt -------------------------------------------------------------------

struct AdaptArgs {
  Common common;
  std::string ckpt, data, out, method = "lora";
  std::size_t rank = 4, k_layers = 1;
  double fraction = 1.0;
};

int run_adapt(const AdaptArgs& a, const CLI::App& cmd) {
  RunConfig cfg = resolve_config(a.common);
  if (cmd.count("--method")) cfg.adapt.method = parse_adapt_method(a.method);
  if (cmd.count("--rank")) cfg.adapt.rank = a.rank;
  if (cmd.count("--k-layers")) cfg.adapt.k_layers = a.k_layers;
  if (cmd.count("--fraction")) cfg.adapt.fraction = a.fraction;
  cfg.adapt.validate();
  const SavedModel m = load_model(a.ckpt);
  TrainConfig tc = a.common.config.empty() ? m.train : cfg.train;
  if (a.common.config.empty() && std::getenv("STRADA_SEED")) tc.seed = cfg.train.seed;
  RunConfig logged = cfg;
  logged.train = tc;
  logged.features = m.features;
  logged.model = m.params.config;
  log_config(logged);
  const DatasetBundle target = load_data(a.data);
  std::ofstream log = open_log(a.out, logged);
  const AdaptResult r = adapt_model(m.params, m.features, target, cfg.adapt, tc,
                                    a.common.config.empty() ? nullptr : &cfg.features, &log);
  save_model(a.out, r.params, m.features, tc);
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(cfg.adapt.method));
  j["trainable_parameters"] = r.report.trainable_parameters;
  j["total_parameters"] = r.report.total_parameters;
  j["train_windows"] = r.report.train_windows;
  j["val_nll_before"] = r.report.val_nll_before;
  j["val_nll_after"] = r.report.val_nll_after;
  std::cout << j.dump() << '\n';
  if (r.report.train.failed()) {
    std::cerr << "error: " << r.report.train.failure << " (best checkpoint saved)\n";
    return kNumeric;
  }
  return kOk;
}

// ---- merge -------------------------------------------------------------------

int run_merge(const std::string& ckpt, const std::string& out) {
  const SavedModel m = load_model(ckpt);
  save_model(out, merge_lora(m.params), m.features, m.train);
  std::cout << "wrote " << out << '\n';
  return kOk;
}

// ---- forecast ----------------------------------------------------------------

struct ForecastArgs {
  Common common;
  std::string ckpt, data, origin, out, mode = "sample";
  std::size_t horizon = 12, samples = 100;
  std::uint64_t seed = 0;
  std::vector<double> quantiles{0.1, 0.9};
};

std::size_t origin_index(const DatasetBundle& d, const std::string& text) {
  const Timestamp ts = parse_timestamp(text);
  if (ts < d.timestamps.front()) throw DataError("origin " + text + " precedes the series");
  const auto offset = (ts - d.timestamps.front()).count();
  const auto step = d.frequency.count();
  const auto k = static_cast<std::size_t>(offset / step);
  if (offset % step != 0 || k > d.steps()) {
    throw DataError("origin " + text + " is not a step of the series (or its next step)");
  }
  return k;
}

int run_forecast(const ForecastArgs& a, const CLI::App& cmd) {
  RunConfig cfg = resolve_config(a.common);
  if (cmd.count("--horizon")) cfg.rollout.horizon = a.horizon;
  if (cmd.count("--samples")) cfg.rollout.n_samples = a.samples;
  if (cmd.count("--seed")) cfg.rollout.seed = a.seed;
  if (cmd.count("--mode")) cfg.rollout.mode = parse_rollout_mode(a.mode);
  cfg.rollout.jobs = a.common.jobs;
  log_config(cfg);
  const SavedModel m = load_checked(a.ckpt, a.common, cfg);
  const DatasetBundle d = load_data(a.data);
  const std::size_t o = origin_index(d, a.origin);
  const std::size_t h = cfg.rollout.horizon;
  const auto ts = d.extended_timestamps(o + h > d.steps() ? o + h - d.steps() : 0);
  const GraphContext graph = prepare_graph(d.graph, m.features);
  const ForecastFan fan = rollout(m.params, m.features, graph, d.series.slice_steps(0, o), ts, cfg.rollout);
  write_forecast_csv(fan, std::span<const Timestamp>(ts).subspan(o, h), a.quantiles, a.out);
  std::cout << "wrote " << a.out << '\n';
  return kOk;
}

// ---- eval / perturb ----------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string ckpt, data, out, split = "test";
  std::vector<std::size_t> horizons{3, 6, 12};
  std::vector<double> sigmas{0.2, 0.4, 0.8, 1.0, 2.0};
  std::size_t samples = 100, max_origins = 0;
  std::uint64_t seed = 0;
  bool raw_noise = false;
};

RunConfig eval_config(const EvalArgs& a, const CLI::App& cmd) {
  RunConfig cfg = resolve_config(a.common);
  if (cmd.count("--horizons")) cfg.eval.horizons = a.horizons;
  if (cmd.count("--samples")) cfg.eval.n_samples = a.samples;
  if (cmd.count("--max-origins")) cfg.eval.max_origins = a.max_origins;
  if (cmd.count("--seed")) cfg.eval.seed = a.seed;
  if (cmd.get_option_no_throw("--sigmas") && cmd.count("--sigmas")) cfg.eval.sigmas = a.sigmas;
  if (cmd.get_option_no_throw("--raw-noise") && cmd.count("--raw-noise")) cfg.eval.normalize_noise = false;
  cfg.eval.validate();
  log_config(cfg);
  return cfg;
}

int run_eval(const EvalArgs& a, const CLI::App& cmd) {
  const RunConfig cfg = eval_config(a, cmd);
  const SavedModel m = load_checked(a.ckpt, a.common, cfg);
  const DatasetBundle d = load_data(a.data);
  const EvalReport r = evaluate(m.params, m.features, d, split_range(d, a.split), a.split, cfg.eval, a.common.jobs);
  write_text(a.out, eval_report_json(r));
  std::cout << "wrote " << a.out << '\n';
  return kOk;
}

int run_perturb(const EvalArgs& a, const CLI::App& cmd) {
  const RunConfig cfg = eval_config(a, cmd);
  const SavedModel m = load_checked(a.ckpt, a.common, cfg);
  const DatasetBundle d = load_data(a.data);
  const auto sweep =
      perturbation_sweep(m.params, m.features, d, split_range(d, a.split), a.split, cfg.eval, a.common.jobs);
  write_sweep_csv(sweep, a.out);
  std::cout << "wrote " << a.out << '\n';
  return kOk;
}

// ---- export-embeddings -------------------------------------------------------

struct EmbedArgs {
  Common common;
  std::string ckpt, data, out;
  std::size_t limit = 1000;
  std::uint64_t seed = 0;
};

int run_embed(const EmbedArgs& a) {
  const RunConfig cfg = resolve_config(a.common);
  log_config(cfg);
  const SavedModel m = load_checked(a.ckpt, a.common, cfg);
  const DatasetBundle d = load_data(a.data);
  export_embeddings(m.params, m.features, d, a.limit, a.seed, a.out);
  std::cout << "wrote " << a.out << '\n';
  return kOk;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-aware probabilistic traffic forecasting"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate a synthetic traffic dataset directory");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--nodes", gen.nodes, "Number of nodes (>= 2)");
  gen_cmd->add_option("--steps", gen.steps, "Number of time steps (>= 500)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--alpha", gen.params.alpha, "Self persistence");
  gen_cmd->add_option("--beta", gen.params.beta, "Neighbor coupling");
  gen_cmd->add_option("--amplitude", gen.params.amplitude, "Daily forcing amplitude");
  gen_cmd->add_option("--period", gen.params.period, "Steps per day");
  gen_cmd->add_option("--noise-nu", gen.params.noise_nu, "Student-t noise degrees of freedom");
  gen_cmd->add_option("--noise-sigma", gen.params.noise_sigma, "Noise scale");

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Train a model from scratch on one or more datasets");
  add_common(pre_cmd, pre.common);
  pre_cmd->add_option("--data", pre.data, "Dataset directories")->required()->expected(1, -1);
  pre_cmd->add_option("--out", pre.out, "Checkpoint path (a .log.jsonl file is written beside it)")->required();

  AdaptArgs ad;
  auto* ad_cmd = app.add_subcommand("adapt", "Fine-tune a checkpoint on a target dataset");
  add_common(ad_cmd, ad.common);
  ad_cmd->add_option("--ckpt", ad.ckpt, "Source checkpoint")->required();
  ad_cmd->add_option("--data", ad.data, "Target dataset directory")->required();
  ad_cmd->add_option("--method", ad.method, "lora, topk or full")
      ->check(CLI::IsMember({"lora", "topk", "full"}));
  ad_cmd->add_option("--rank", ad.rank, "Adapter rank (lora)");
  ad_cmd->add_option("--k-layers", ad.k_layers, "Trailing layers to tune (topk)");
  ad_cmd->add_option("--fraction", ad.fraction, "Share of the target train windows, in (0, 1]");
  ad_cmd->add_option("--out", ad.out, "Adapted checkpoint path")->required();

  std::string merge_in, merge_out;
  auto* merge_cmd = app.add_subcommand("merge", "Fold adapters into the base weights");
  merge_cmd->add_option("--ckpt", merge_in, "Adapted checkpoint")->required();
  merge_cmd->add_option("--out", merge_out, "Merged checkpoint path")->required();

  ForecastArgs fc;
  auto* fc_cmd = app.add_subcommand("forecast", "Sample forecast trajectories from an origin");
  add_common(fc_cmd, fc.common);
  fc_cmd->add_option("--ckpt", fc.ckpt, "Checkpoint")->required();
  fc_cmd->add_option("--data", fc.data, "Dataset directory")->required();
  fc_cmd->add_option("--origin", fc.origin, "Timestamp of the first forecast step; history ends before it")
      ->required();
  fc_cmd->add_option("--horizon", fc.horizon, "Forecast steps");
  fc_cmd->add_option("--samples", fc.samples, "Trajectories")->check(CLI::PositiveNumber);
  fc_cmd->add_option("--seed", fc.seed, "Sampling seed");
  fc_cmd->add_option("--mode", fc.mode, "sample or mean-path")->check(CLI::IsMember({"sample", "mean-path"}));
  fc_cmd->add_option("--quantiles", fc.quantiles, "Quantile levels written beside the median")->delimiter(',');
  fc_cmd->add_option("--out", fc.out, "Forecast CSV")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Walk-forward evaluation against the persistence baseline");
  EvalArgs pt;
  auto* pt_cmd = app.add_subcommand("perturb", "Evaluation under additive Gaussian input noise");
  for (auto [cmd, args] : {std::pair{ev_cmd, &ev}, std::pair{pt_cmd, &pt}}) {
    add_common(cmd, args->common);
    cmd->add_option("--ckpt", args->ckpt, "Checkpoint")->required();
    cmd->add_option("--data", args->data, "Dataset directory")->required();
    cmd->add_option("--split", args->split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--horizons", args->horizons, "Horizons to score")->delimiter(',');
    cmd->add_option("--samples", args->samples, "Trajectories per origin")->check(CLI::PositiveNumber);
    cmd->add_option("--max-origins", args->max_origins, "Cap on forecast origins (0 = all)");
    cmd->add_option("--seed", args->seed, "Evaluation seed");
    cmd->add_option("--out", args->out, cmd == ev_cmd ? "Report (JSON)" : "Sweep CSV")->required();
  }
  pt_cmd->add_option("--sigmas", pt.sigmas, "Noise standard deviations, ascending")->delimiter(',');
  pt_cmd->add_flag("--raw-noise", pt.raw_noise, "Add the noise without min-max normalization");

  EmbedArgs em;
  auto* em_cmd = app.add_subcommand("export-embeddings", "Write last-layer embeddings of sampled windows");
  add_common(em_cmd, em.common);
  em_cmd->add_option("--ckpt", em.ckpt, "Checkpoint")->required();
  em_cmd->add_option("--data", em.data, "Dataset directory")->required();
  em_cmd->add_option("--limit", em.limit, "Windows to export");
  em_cmd->add_option("--seed", em.seed, "Window selection seed");
  em_cmd->add_option("--out", em.out, "Embedding CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  return guarded([&] {
    if (*gen_cmd) return run_gen_synth(gen);
    if (*pre_cmd) return run_pretrain(pre);
    if (*ad_cmd) return run_adapt(ad, *ad_cmd);
    if (*merge_cmd) return run_merge(merge_in, merge_out);
    if (*fc_cmd) return run_forecast(fc, *fc_cmd);
    if (*ev_cmd) return run_eval(ev, *ev_cmd);
    if (*pt_cmd) return run_perturb(pt, *pt_cmd);
    if (*em_cmd) return run_embed(em);
    return static_cast<int>(kUsage);
  });
}
