#pragma once

// Autoregressive probabilistic forecasting: all nodes advance together one
// step at a time, each trajectory drawing from its own random stream.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "strada/features.hpp"
#include "strada/model.hpp"

namespace strada {

enum class RolloutMode { sample, mean_path };

std::string_view to_string(RolloutMode mode);
RolloutMode parse_rollout_mode(std::string_view text);

struct RolloutConfig {
  std::size_t horizon = 12;
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  RolloutMode mode = RolloutMode::sample;
  std::size_t jobs = 1;

  void validate() const;
  friend bool operator==(const RolloutConfig&, const RolloutConfig&) = default;
};

// N × H × S values, trajectories innermost.
struct ForecastFan {
  std::size_t nodes = 0;
  std::size_t horizon = 0;
  std::size_t samples = 0;
  std::vector<double> values;

  ForecastFan() = default;
  ForecastFan(std::size_t n, std::size_t h, std::size_t s) : nodes(n), horizon(h), samples(s), values(n * h * s) {}

  double& at(std::size_t n, std::size_t h, std::size_t s) { return values[(n * horizon + h) * samples + s]; }
  double at(std::size_t n, std::size_t h, std::size_t s) const {
    return values[(n * horizon + h) * samples + s];
  }
  std::span<const double> draws(std::size_t n, std::size_t h) const {
    return std::span<const double>(values).subspan((n * horizon + h) * samples, samples);
  }
};

// Forecasts the `cfg.horizon` steps after `history` (single-feature series,
// at least max_lag + C steps; only the most recent max_lag + C are read).
// `timestamps` covers the history followed by the forecast steps.
ForecastFan rollout(const ModelParams<float>& params, const FeatureConfig& fc,
                    const GraphContext& graph, const Series& history,
                    std::span<const Timestamp> timestamps, const RolloutConfig& cfg);

// Linear interpolation between order statistics of sorted values.
double empirical_quantile(std::span<const double> sorted, double level);

// N × H medians (the mean of the two central values for an even count).
Eigen::MatrixXd point_forecast(const ForecastFan& fan);
// One N × H matrix per level.
std::vector<Eigen::MatrixXd> quantiles(const ForecastFan& fan, std::span<const double> levels);

// Columns node, step, time, median, q<level>...; `timestamps` holds the
// forecast steps.
void write_forecast_csv(const ForecastFan& fan, std::span<const Timestamp> timestamps,
                        std::span<const double> levels, const std::filesystem::path& path);

}  // namespace strada
