#pragma once

// Point metrics, the persistence baseline, walk-forward evaluation, noise
// robustness sweeps, interval coverage and embedding export.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "strada/datahub.hpp"
#include "strada/features.hpp"
#include "strada/infer.hpp"
#include "strada/model.hpp"

namespace strada {

inline constexpr double kMapeFloor = 1e-3;

struct MetricSet {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;       // percent, over unmasked entries
  std::size_t count = 0;   // entries scored by MAE and RMSE
  std::size_t masked = 0;  // entries left out of MAPE (|y| < floor)
};

// Shapes must match. MAPE skips |y| < floor; with every entry masked it is 0.
MetricSet compute_metrics(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth,
                          double mape_floor = kMapeFloor);
double mae(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth);
double rmse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth);
double mape(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, double floor = kMapeFloor);

// Running sums for metrics pooled over many forecasts.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(double mape_floor = kMapeFloor) : floor_(mape_floor) {}
  void add(double pred, double truth);
  MetricSet result() const;

 private:
  double floor_;
  double abs_ = 0.0, sq_ = 0.0, pct_ = 0.0;
  std::size_t n_ = 0, pct_n_ = 0, masked_ = 0;
};

// N × H: each node's last observed value repeated (feature 0).
Eigen::MatrixXd persistence_baseline(const Series& history, std::size_t horizon);

// Fraction of (node, step) pairs whose truth lies in the central `level`
// interval of the fan.
double coverage_check(const ForecastFan& fan, const Eigen::MatrixXd& truth, double level);

struct EvalConfig {
  std::vector<std::size_t> horizons{3, 6, 12};
  std::size_t n_samples = 100;
  RolloutMode mode = RolloutMode::sample;
  // Forecast origins are spaced by the largest horizon; 0 keeps all of
  // them, otherwise they are thinned evenly to this many.
  std::size_t max_origins = 0;
  std::size_t nll_windows = 512;
  double mape_floor = kMapeFloor;
  std::vector<double> sigmas{0.2, 0.4, 0.8, 1.0, 2.0};
  bool normalize_noise = true;  // min-max rescale each noise matrix to [0, 1]
  double coverage_level = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct HorizonMetrics {
  std::size_t horizon = 0;
  MetricSet model;
  MetricSet persistence;
};

struct EvalReport {
  std::string dataset;
  std::string split;
  std::size_t origins = 0;
  std::size_t n_samples = 0;
  std::vector<HorizonMetrics> horizons;
  double coverage_level = 0.0;
  double coverage = 0.0;           // share of truths inside the central interval, all steps
  double test_nll = 0.0;           // raw units, teacher-forced windows
  double climatology_nll = 0.0;    // per-node Gaussian fitted on the train split
  std::size_t nll_positions = 0;
};

// Walk-forward origins o with o ≥ max(range.begin, history need) and
// o + max_horizon ≤ range.end, max_horizon apart.
std::vector<std::size_t> forecast_origins(const Range& range, std::size_t min_history,
                                          std::size_t max_horizon, std::size_t max_origins);

// Seed of the rollout at `origin`.
std::uint64_t origin_seed(std::uint64_t seed, std::size_t origin);

// Forecasts from every origin of `range` and scores the medians against the
// dataset values at steps 1..max(horizons); `inputs`, when given, replaces
// the series the model and the persistence baseline read (same shape).
EvalReport evaluate(const ModelParams<float>& params, const FeatureConfig& fc, const DatasetBundle& data,
                    const Range& range, const std::string& split_name, const EvalConfig& cfg,
                    std::size_t jobs = 1, const Series* inputs = nullptr);

// Raw-space mean NLL of the model and of the climatology over windows
// spaced C apart in `range`, capped at `limit` windows.
struct NllComparison {
  double model = 0.0;
  double climatology = 0.0;
  std::size_t positions = 0;
};
NllComparison nll_against_climatology(const ModelParams<float>& params, const FeatureConfig& fc,
                                      const DatasetBundle& data, const Range& range, std::size_t limit);

// Adds N(0, σ²) noise to rows [first, last) of every node; with `normalize`
// the noise matrix is min-max rescaled to [0, 1] first.
Series perturb_inputs(const Series& series, std::size_t first, std::size_t last, double sigma,
                      std::uint64_t seed, bool normalize);

struct SweepPoint {
  double sigma = 0.0;
  EvalReport report;
};

// One evaluation per σ on perturbed inputs covering the split and the
// history its first origin reads; every σ uses the same noise stream.
std::vector<SweepPoint> perturbation_sweep(const ModelParams<float>& params, const FeatureConfig& fc,
                                           const DatasetBundle& data, const Range& range,
                                           const std::string& split_name, const EvalConfig& cfg,
                                           std::size_t jobs = 1);

// Final-norm output at the last position of up to `limit` windows drawn
// without replacement (seeded) over the whole series, in time then node
// order. Columns: dataset, node, time, e0..e{d-1}.
void export_embeddings(const ModelParams<float>& params, const FeatureConfig& fc, const DatasetBundle& data,
                       std::size_t limit, std::uint64_t seed, const std::filesystem::path& path);

std::string eval_report_json(const EvalReport& report);
void write_sweep_csv(std::span<const SweepPoint> sweep, const std::filesystem::path& path);

}  // namespace strada
