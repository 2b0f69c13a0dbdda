#include "strada/infer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "strada/error.hpp"
#include "strada/parallel.hpp"
#include "strada/rng.hpp"
#include "strada/textio.hpp"

namespace strada {

std::string_view to_string(RolloutMode mode) {
  return mode == RolloutMode::sample ? "sample" : "mean-path";
}

RolloutMode parse_rollout_mode(std::string_view text) {
  if (text == "sample") return RolloutMode::sample;
  if (text == "mean-path") return RolloutMode::mean_path;
  throw ConfigError("unknown rollout mode '" + std::string(text) + "' (expected sample or mean-path)");
}

void RolloutConfig::validate() const {
  if (n_samples == 0) throw ConfigError("rollout: n_samples must be >= 1");
}

namespace {

// Trajectories per work item. Fixed so the batched forward passes, and with
// them every rounding, do not depend on the number of threads.
constexpr std::size_t kTrajectoriesPerTask = 4;

void run_trajectories(const ModelParams<float>& params, const FeatureConfig& fc,
                      const GraphContext& graph, const Series& base,
                      std::span<const Timestamp> timestamps, const RolloutConfig& cfg,
                      std::size_t first, std::size_t count, ForecastFan& fan) {
  const std::size_t w = base.steps();
  const std::size_t n = base.nodes();
  const std::size_t ctx = params.config.context_length;
  const std::size_t dim = fc.token_dim();
  const auto head = head_transform<double>(params.config);

  std::vector<Series> work(count, Series(w + cfg.horizon, n, 1));
  std::vector<RngStream> streams;
  for (std::size_t j = 0; j < count; ++j) {
    std::copy(base.data().begin(), base.data().end(), work[j].data().begin());
    streams.emplace_back(cfg.seed, first + j);
  }
  Tensor<float> tokens({count * n * ctx, dim});
  std::vector<Scaler> scalers(count * n);
  for (std::size_t h = 0; h < cfg.horizon; ++h) {
    const std::size_t t = w + h;
    std::size_t k = 0;
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t v = 0; v < n; ++v) {
        Sample c = make_context(work[j], timestamps, graph.neighborhoods[v], graph.pe.row(v), t, ctx, fc);
        for (double x : c.tokens) tokens[k++] = static_cast<float>(x);
        scalers[j * n + v] = std::move(c.scaler);
      }
    }
    const ForwardOutput<float> out = forward(params, tokens, ctx);
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t v = 0; v < n; ++v) {
        const std::size_t r = (j * n + v + 1) * ctx - 1;
        const StudentTParams d = to_student_t<double>(head, out.head(r, 0), out.head(r, 1), out.head(r, 2));
        const double z = cfg.mode == RolloutMode::sample ? sample_student_t(d, streams[j]) : d.mu;
        const double x = scalers[j * n + v].invert(z);
        if (!std::isfinite(x)) {
          throw NumericError("rollout: non-finite value at step " + std::to_string(h + 1) + " for node " +
                             std::to_string(v) + " (trajectory " + std::to_string(first + j) + ")");
        }
        work[j].at(t, v) = x;
        fan.at(v, h, first + j) = x;
      }
    }
  }
}

}  // namespace

ForecastFan rollout(const ModelParams<float>& params, const FeatureConfig& fc,
                    const GraphContext& graph, const Series& history,
                    std::span<const Timestamp> timestamps, const RolloutConfig& cfg) {
  cfg.validate();
  if (params.config.token_dim != fc.token_dim()) {
    throw ConfigError("rollout: model token_dim " + std::to_string(params.config.token_dim) +
                      " does not match the feature layout (" + std::to_string(fc.token_dim()) + ")");
  }
  if (history.features() != 1) throw InputError("rollout: only single-feature series can be forecast");
  if (graph.nodes() != history.nodes()) {
    throw InputError("rollout: graph has " + std::to_string(graph.nodes()) + " nodes, history has " +
                     std::to_string(history.nodes()));
  }
  const std::size_t w = min_history(fc, params.config.context_length);
  if (history.steps() < w) {
    throw DataError("rollout: insufficient history: " + std::to_string(history.steps()) +
                    " steps given, at least " + std::to_string(w) + " required");
  }
  if (timestamps.size() < history.steps() + cfg.horizon) {
    throw InputError("rollout: timestamps must cover the history and " + std::to_string(cfg.horizon) +
                     " forecast steps");
  }
  ForecastFan fan(history.nodes(), cfg.horizon, cfg.n_samples);
  if (cfg.horizon == 0) return fan;

  const std::size_t start = history.steps() - w;
  const Series base = history.slice_steps(start, history.steps());
  const auto ts = timestamps.subspan(start, w + cfg.horizon);

  if (cfg.mode == RolloutMode::mean_path) {
    ForecastFan one(history.nodes(), cfg.horizon, 1);
    run_trajectories(params, fc, graph, base, ts, cfg, 0, 1, one);
    for (std::size_t v = 0; v < fan.nodes; ++v) {
      for (std::size_t h = 0; h < fan.horizon; ++h) {
        for (std::size_t s = 0; s < fan.samples; ++s) fan.at(v, h, s) = one.at(v, h, 0);
      }
    }
    return fan;
  }
  const std::size_t tasks = (cfg.n_samples + kTrajectoriesPerTask - 1) / kTrajectoriesPerTask;
  parallel_for(tasks, cfg.jobs, [&](std::size_t task) {
    const std::size_t first = task * kTrajectoriesPerTask;
    const std::size_t count = std::min(kTrajectoriesPerTask, cfg.n_samples - first);
    run_trajectories(params, fc, graph, base, ts, cfg, first, count, fan);
  });
  return fan;
}

double empirical_quantile(std::span<const double> sorted, double level) {
  if (sorted.empty()) throw InputError("empirical_quantile: no values");
  if (!(level >= 0.0 && level <= 1.0)) throw InputError("empirical_quantile: level outside [0, 1]");
  const double pos = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return frac == 0.0 ? sorted[lo] : sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

template <typename Fn>
void for_each_sorted(const ForecastFan& fan, Fn&& fn) {
  if (fan.samples == 0) throw InputError("forecast fan holds no trajectories");
  std::vector<double> buf(fan.samples);
  for (std::size_t v = 0; v < fan.nodes; ++v) {
    for (std::size_t h = 0; h < fan.horizon; ++h) {
      const auto d = fan.draws(v, h);
      std::copy(d.begin(), d.end(), buf.begin());
      std::sort(buf.begin(), buf.end());
      fn(v, h, std::span<const double>(buf));
    }
  }
}

}  // namespace

Eigen::MatrixXd point_forecast(const ForecastFan& fan) {
  Eigen::MatrixXd out(fan.nodes, fan.horizon);
  for_each_sorted(fan, [&](std::size_t v, std::size_t h, std::span<const double> s) {
    const std::size_t m = s.size() / 2;
    out(v, h) = s.size() % 2 == 1 ? s[m] : 0.5 * (s[m - 1] + s[m]);
  });
  return out;
}

std::vector<Eigen::MatrixXd> quantiles(const ForecastFan& fan, std::span<const double> levels) {
  for (double q : levels) {
    if (!(q > 0.0 && q < 1.0)) throw InputError("quantiles: level " + text::format_double(q) + " outside (0, 1)");
  }
  std::vector<Eigen::MatrixXd> out(levels.size(), Eigen::MatrixXd(fan.nodes, fan.horizon));
  for_each_sorted(fan, [&](std::size_t v, std::size_t h, std::span<const double> s) {
    for (std::size_t i = 0; i < levels.size(); ++i) out[i](v, h) = empirical_quantile(s, levels[i]);
  });
  return out;
}

void write_forecast_csv(const ForecastFan& fan, std::span<const Timestamp> timestamps,
                        std::span<const double> levels, const std::filesystem::path& path) {
  if (timestamps.size() < fan.horizon) throw InputError("write_forecast_csv: missing forecast timestamps");
  const Eigen::MatrixXd med = point_forecast(fan);
  const auto qs = quantiles(fan, levels);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "node,step,time,median";
  for (double q : levels) out << ",q" << text::format_double(q);
  out << '\n';
  for (std::size_t v = 0; v < fan.nodes; ++v) {
    for (std::size_t h = 0; h < fan.horizon; ++h) {
      out << v << ',' << h + 1 << ',' << format_timestamp(timestamps[h]) << ','
          << text::format_double(med(v, h));
      for (const auto& q : qs) out << ',' << text::format_double(q(v, h));
      out << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace strada
