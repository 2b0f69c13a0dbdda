#include "strada/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>

#include "strada/error.hpp"
#include "strada/rng.hpp"
#include "strada/textio.hpp"
#include "strada/train.hpp"

namespace strada {

namespace {

void check_shapes(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, const char* what) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw DimensionError(std::string(what) + ": prediction is " + std::to_string(pred.rows()) + "x" +
                         std::to_string(pred.cols()) + ", truth is " + std::to_string(truth.rows()) + "x" +
                         std::to_string(truth.cols()));
  }
}

}  // namespace

void MetricAccumulator::add(double pred, double truth) {
  const double e = pred - truth;
  abs_ += std::abs(e);
  sq_ += e * e;
  ++n_;
  if (std::abs(truth) >= floor_) {
    pct_ += std::abs(e) / std::abs(truth);
    ++pct_n_;
  } else {
    ++masked_;
  }
}

MetricSet MetricAccumulator::result() const {
  MetricSet m;
  m.count = n_;
  m.masked = masked_;
  if (n_ > 0) {
    m.mae = abs_ / static_cast<double>(n_);
    m.rmse = std::sqrt(sq_ / static_cast<double>(n_));
  }
  if (pct_n_ > 0) m.mape = 100.0 * pct_ / static_cast<double>(pct_n_);
  return m;
}

MetricSet compute_metrics(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, double mape_floor) {
  check_shapes(pred, truth, "metrics");
  MetricAccumulator acc(mape_floor);
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index j = 0; j < pred.cols(); ++j) acc.add(pred(i, j), truth(i, j));
  }
  return acc.result();
}

double mae(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) { return compute_metrics(pred, truth).mae; }
double rmse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth) { return compute_metrics(pred, truth).rmse; }
double mape(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, double floor) {
  return compute_metrics(pred, truth, floor).mape;
}

Eigen::MatrixXd persistence_baseline(const Series& history, std::size_t horizon) {
  if (history.steps() == 0) throw InputError("persistence_baseline: empty history");
  Eigen::MatrixXd out(history.nodes(), horizon);
  for (std::size_t v = 0; v < history.nodes(); ++v) {
    out.row(static_cast<Eigen::Index>(v)).setConstant(history.at(history.steps() - 1, v));
  }
  return out;
}

namespace {

std::size_t covered(const ForecastFan& fan, const Eigen::MatrixXd& truth, double level) {
  if (!(level > 0.0 && level < 1.0)) throw InputError("coverage_check: level must lie in (0, 1)");
  if (truth.rows() != static_cast<Eigen::Index>(fan.nodes) ||
      truth.cols() != static_cast<Eigen::Index>(fan.horizon)) {
    throw DimensionError("coverage_check: truth is " + std::to_string(truth.rows()) + "x" +
                         std::to_string(truth.cols()) + ", fan is " + std::to_string(fan.nodes) + "x" +
                         std::to_string(fan.horizon));
  }
  const std::vector<double> levels{(1.0 - level) / 2.0, (1.0 + level) / 2.0};
  const auto q = quantiles(fan, levels);
  std::size_t inside = 0;
  for (Eigen::Index i = 0; i < truth.rows(); ++i) {
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
      if (truth(i, j) >= q[0](i, j) && truth(i, j) <= q[1](i, j)) ++inside;
    }
  }
  return inside;
}

}  // namespace

double coverage_check(const ForecastFan& fan, const Eigen::MatrixXd& truth, double level) {
  const std::size_t inside = covered(fan, truth, level);
  const auto pairs = static_cast<double>(truth.size());
  return pairs == 0 ? 0.0 : static_cast<double>(inside) / pairs;
}

void EvalConfig::validate() const {
  if (horizons.empty()) throw ConfigError("eval: at least one horizon is required");
  for (std::size_t h : horizons) {
    if (h == 0) throw ConfigError("eval: horizons must be >= 1");
  }
  if (n_samples == 0) throw ConfigError("eval: n_samples must be >= 1");
  if (!(mape_floor > 0.0)) throw ConfigError("eval: mape_floor must be positive");
  if (!(coverage_level > 0.0 && coverage_level < 1.0)) throw ConfigError("eval: coverage_level must lie in (0, 1)");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw ConfigError("eval: noise sigmas must be positive");
    if (i > 0 && sigmas[i] < sigmas[i - 1]) throw ConfigError("eval: noise sigmas must be sorted ascending");
  }
}

std::vector<std::size_t> forecast_origins(const Range& range, std::size_t min_history, std::size_t max_horizon,
                                          std::size_t max_origins) {
  std::vector<std::size_t> all;
  const std::size_t step = std::max<std::size_t>(1, max_horizon);
  for (std::size_t o = std::max(range.begin, min_history); o + max_horizon <= range.end; o += step) {
    all.push_back(o);
  }
  if (max_origins == 0 || all.size() <= max_origins) return all;
  std::vector<std::size_t> kept;
  kept.reserve(max_origins);
  for (std::size_t i = 0; i < max_origins; ++i) kept.push_back(all[i * all.size() / max_origins]);
  return kept;
}

std::uint64_t origin_seed(std::uint64_t seed, std::size_t origin) {
  return detail::mix64(seed ^ detail::mix64(static_cast<std::uint64_t>(origin) + 0x9E3779B97F4A7C15ULL));
}

NllComparison nll_against_climatology(const ModelParams<float>& params, const FeatureConfig& fc,
                                      const DatasetBundle& data, const Range& range, std::size_t limit) {
  const Range& train = data.splits.train;
  if (train.size() < 2) throw DataError("nll: climatology needs a train split of at least two steps");
  const std::size_t n = data.nodes();
  std::vector<double> mean(n, 0.0), var(n, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t t = train.begin; t < train.end; ++t) mean[v] += data.series.at(t, v);
    mean[v] /= static_cast<double>(train.size());
    for (std::size_t t = train.begin; t < train.end; ++t) {
      const double d = data.series.at(t, v) - mean[v];
      var[v] += d * d;
    }
    var[v] = std::max(var[v] / static_cast<double>(train.size()), 1e-12);
  }

  const std::size_t ctx = params.config.context_length;
  const GraphContext graph = prepare_graph(data.graph, fc);
  const DatasetView view = split_view(data, graph, range, fc, ctx);
  const std::vector<Sample> samples = evaluation_samples(view, fc, ctx, ctx, limit);
  const std::vector<double> scaled = sample_nll(params, std::span<const Sample>(samples));

  NllComparison out;
  double model = 0.0, clim = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    model += (scaled[i] + std::log(s.scaler.scale[0])) * static_cast<double>(ctx);
    for (std::size_t p = 0; p < ctx; ++p) {
      const double y = data.series.at(s.window_end + 1 - ctx + p, s.node);
      const double d = y - mean[s.node];
      clim += 0.5 * std::log(2.0 * std::numbers::pi * var[s.node]) + d * d / (2.0 * var[s.node]);
    }
    out.positions += ctx;
  }
  out.model = model / static_cast<double>(out.positions);
  out.climatology = clim / static_cast<double>(out.positions);
  return out;
}

namespace {

EvalReport walk_forward(const ModelParams<float>& params, const FeatureConfig& fc, const DatasetBundle& data,
                        const GraphContext& graph, const Range& range, const std::string& split_name,
                        const EvalConfig& cfg, std::size_t jobs, const Series& inputs) {
  const std::size_t h_max = *std::max_element(cfg.horizons.begin(), cfg.horizons.end());
  const std::size_t w = min_history(fc, params.config.context_length);
  const auto origins = forecast_origins(range, w, h_max, cfg.max_origins);
  if (origins.empty()) {
    throw DataError("eval: split '" + split_name + "' [" + std::to_string(range.begin) + ", " +
                    std::to_string(range.end) + ") admits no forecast origin with " + std::to_string(w) +
                    " steps of history and horizon " + std::to_string(h_max));
  }
  const std::size_t n = data.nodes();
  std::vector<MetricAccumulator> model(cfg.horizons.size(), MetricAccumulator(cfg.mape_floor));
  std::vector<MetricAccumulator> base(cfg.horizons.size(), MetricAccumulator(cfg.mape_floor));
  std::size_t inside = 0, pairs = 0;
  for (std::size_t o : origins) {
    const Series history = inputs.slice_steps(o - w, o);
    const std::span<const Timestamp> ts = std::span<const Timestamp>(data.timestamps).subspan(o - w, w + h_max);
    RolloutConfig rc;
    rc.horizon = h_max;
    rc.n_samples = cfg.n_samples;
    rc.seed = origin_seed(cfg.seed, o);
    rc.mode = cfg.mode;
    rc.jobs = jobs;
    const ForecastFan fan = rollout(params, fc, graph, history, ts, rc);
    const Eigen::MatrixXd median = point_forecast(fan);
    const Eigen::MatrixXd persist = persistence_baseline(history, h_max);
    Eigen::MatrixXd truth(n, h_max);
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t h = 0; h < h_max; ++h) truth(v, h) = data.series.at(o + h, v);
    }
    for (std::size_t i = 0; i < cfg.horizons.size(); ++i) {
      const auto col = static_cast<Eigen::Index>(cfg.horizons[i] - 1);
      for (std::size_t v = 0; v < n; ++v) {
        const auto row = static_cast<Eigen::Index>(v);
        model[i].add(median(row, col), truth(row, col));
        base[i].add(persist(row, col), truth(row, col));
      }
    }
    inside += covered(fan, truth, cfg.coverage_level);
    pairs += static_cast<std::size_t>(truth.size());
  }
  EvalReport r;
  r.dataset = data.name;
  r.split = split_name;
  r.origins = origins.size();
  r.n_samples = cfg.n_samples;
  for (std::size_t i = 0; i < cfg.horizons.size(); ++i) {
    r.horizons.push_back({cfg.horizons[i], model[i].result(), base[i].result()});
  }
  r.coverage_level = cfg.coverage_level;
  r.coverage = static_cast<double>(inside) / static_cast<double>(pairs);
  return r;
}

void check_inputs(const DatasetBundle& data, const Series& inputs) {
  if (inputs.steps() != data.steps() || inputs.nodes() != data.nodes() ||
      inputs.features() != data.series.features()) {
    throw DimensionError("eval: substituted inputs do not match the dataset shape");
  }
}

}  // namespace

EvalReport evaluate(const ModelParams<float>& params, const FeatureConfig& fc, const DatasetBundle& data,
                    const Range& range, const std::string& split_name, const EvalConfig& cfg, std::size_t jobs,
                    const Series* inputs) {
  cfg.validate();
  if (inputs) check_inputs(data, *inputs);
  const GraphContext graph = prepare_graph(data.graph, fc);
  EvalReport r = walk_forward(params, fc, data, graph, range, split_name, cfg, jobs, inputs ? *inputs : data.series);
  const NllComparison nll = nll_against_climatology(params, fc, data, range, cfg.nll_windows);
  r.test_nll = nll.model;
  r.climatology_nll = nll.climatology;
  r.nll_positions = nll.positions;
  return r;
}

Series perturb_inputs(const Series& series, std::size_t first, std::size_t last, double sigma, std::uint64_t seed,
                      bool normalize) {
  if (first > last || last > series.steps()) throw InputError("perturb_inputs: bad step range");
  if (!(sigma >= 0.0)) throw InputError("perturb_inputs: sigma must be nonnegative");
  const std::size_t width = series.nodes() * series.features();
  std::vector<double> noise((last - first) * width);
  RngStream stream(seed, 4);
  for (double& e : noise) e = sigma * stream.normal();
  if (normalize && !noise.empty()) {
    const auto [lo, hi] = std::minmax_element(noise.begin(), noise.end());
    const double min = *lo, span = *hi - *lo;
    for (double& e : noise) e = span > 0.0 ? (e - min) / span : 0.0;
  }
  Series out = series;
  auto data = out.data().subspan(first * width, noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i) data[i] += noise[i];
  return out;
}

std::vector<SweepPoint> perturbation_sweep(const ModelParams<float>& params, const FeatureConfig& fc,
                                           const DatasetBundle& data, const Range& range,
                                           const std::string& split_name, const EvalConfig& cfg, std::size_t jobs) {
  cfg.validate();
  const GraphContext graph = prepare_graph(data.graph, fc);
  const std::size_t w = min_history(fc, params.config.context_length);
  const std::size_t first = range.begin > w ? range.begin - w : 0;
  const std::size_t last = std::min(range.end, data.steps());
  std::vector<SweepPoint> out;
  for (double sigma : cfg.sigmas) {
    const Series noisy = perturb_inputs(data.series, first, last, sigma, cfg.seed, cfg.normalize_noise);
    out.push_back({sigma, walk_forward(params, fc, data, graph, range, split_name, cfg, jobs, noisy)});
  }
  return out;
}

void export_embeddings(const ModelParams<float>& params, const FeatureConfig& fc, const DatasetBundle& data,
                       std::size_t limit, std::uint64_t seed, const std::filesystem::path& path) {
  const std::size_t ctx = params.config.context_length;
  const std::size_t d = params.config.d_model;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "dataset,node,time";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';

  std::vector<std::pair<std::size_t, std::size_t>> picks;  // (window end, node)
  const auto ends = window_end_range(0, data.steps(), fc, ctx);
  if (limit > 0 && ends) {
    const std::size_t per_node = ends->second - ends->first + 1;
    const std::size_t total = per_node * data.nodes();
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    const std::size_t take = std::min(limit, total);
    RngStream stream(seed, 5);
    for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + stream.below(total - i)]);
    for (std::size_t i = 0; i < take; ++i) {
      picks.emplace_back(ends->first + idx[i] / data.nodes(), idx[i] % data.nodes());
    }
    std::sort(picks.begin(), picks.end());
  }

  const GraphContext graph = prepare_graph(data.graph, fc);
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < picks.size(); begin += kChunk) {
    const std::size_t end = std::min(picks.size(), begin + kChunk);
    std::vector<Sample> samples;
    for (std::size_t i = begin; i < end; ++i) {
      const auto [t, v] = picks[i];
      samples.push_back(make_sample(data.series, data.timestamps, graph.neighborhoods[v], graph.pe.row(v), t, ctx, fc));
    }
    const Batch<float> b = make_batch<float>(samples);
    const ForwardOutput<float> f = forward(params, b.tokens, ctx);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out << data.name << ',' << samples[i].node << ',' << format_timestamp(data.timestamps[samples[i].window_end]);
      const std::size_t r = (i + 1) * ctx - 1;
      for (std::size_t j = 0; j < d; ++j) out << ',' << text::format_double(f.hidden(r, j));
      out << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

namespace {

nlohmann::ordered_json metrics_json(const MetricSet& m) {
  nlohmann::ordered_json j;
  j["mae"] = m.mae;
  j["rmse"] = m.rmse;
  j["mape"] = m.mape;
  j["count"] = m.count;
  j["masked"] = m.masked;
  return j;
}

}  // namespace

std::string eval_report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["split"] = r.split;
  j["origins"] = r.origins;
  j["n_samples"] = r.n_samples;
  auto& hs = j["horizons"] = nlohmann::ordered_json::array();
  for (const auto& h : r.horizons) {
    nlohmann::ordered_json e;
    e["horizon"] = h.horizon;
    e["model"] = metrics_json(h.model);
    e["persistence"] = metrics_json(h.persistence);
    hs.push_back(std::move(e));
  }
  j["coverage"] = {{"level", r.coverage_level}, {"fraction", r.coverage}};
  j["nll"] = {{"model", r.test_nll}, {"climatology", r.climatology_nll}, {"positions", r.nll_positions}};
  return j.dump(2) + "\n";
}

void write_sweep_csv(std::span<const SweepPoint> sweep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sigma,horizon,mae,rmse,mape,persistence_mae\n";
  for (const auto& p : sweep) {
    for (const auto& h : p.report.horizons) {
      out << text::format_double(p.sigma) << ',' << h.horizon << ',' << text::format_double(h.model.mae) << ','
          << text::format_double(h.model.rmse) << ',' << text::format_double(h.model.mape) << ','
          << text::format_double(h.persistence.mae) << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace strada
