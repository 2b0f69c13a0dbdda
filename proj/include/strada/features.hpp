#pragma once

// Graph-aware tokenization of traffic series.
//
// Token layout for a center node v at time τ (F channels, M slots):
//
//   [ lags of neighborhood[0] | ... | lags of neighborhood[M-1] | date-time | PE row of v ]
//     |L|·F values per slot, zero for padded slots      F_dt values   k_pe values
//
// so token_dim = |L|·M·F + F_dt + k_pe. A token at τ only reads values at
// τ − ℓ (ℓ ≥ 1) and is trained to predict the center node's value at τ.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "strada/graph.hpp"

namespace strada {

using Timestamp = std::chrono::sys_seconds;

// Accepts "YYYY-MM-DDTHH:MM[:SS][Z]" (a space may replace the 'T').
Timestamp parse_timestamp(std::string_view text);
std::string format_timestamp(Timestamp ts);

class LagSet {
 public:
  explicit LagSet(std::vector<std::size_t> indices);
  // {1..12, 24, 48, 72, 96, 144, 288}: five minutes up to one day at a
  // five-minute step.
  static LagSet traffic_default();

  std::span<const std::size_t> indices() const noexcept { return indices_; }
  std::size_t size() const noexcept { return indices_.size(); }
  std::size_t max_lag() const noexcept { return indices_.back(); }

  friend bool operator==(const LagSet&, const LagSet&) = default;

 private:
  std::vector<std::size_t> indices_;
};

enum class DateTimeField {
  second_of_minute,
  minute_of_hour,
  hour_of_day,
  day_of_week,
  day_of_month,
  day_of_year,
  month_of_year,
  quarter_of_year,
};

std::string_view to_string(DateTimeField field);
DateTimeField parse_datetime_field(std::string_view name);
std::size_t cardinality(DateTimeField field);
// minute-of-hour, hour-of-day, day-of-week, day-of-month, day-of-year,
// month-of-year, quarter-of-year.
std::vector<DateTimeField> default_datetime_fields();

// Each field maps its index to idx/(cardinality − 1) − 0.5 ∈ [−0.5, 0.5].
std::vector<double> datetime_features(Timestamp ts, std::span<const DateTimeField> fields);

struct FeatureConfig {
  LagSet lags = LagSet::traffic_default();
  KHopSpec hops{3, 8};
  std::vector<DateTimeField> datetime = default_datetime_fields();
  std::size_t k_pe = 4;
  std::size_t num_features = 1;
  double scale_floor = 1e-3;

  // Neighbor slots per token; a 0-hop neighborhood has exactly one.
  std::size_t slots() const { return hops.k == 0 ? 1 : hops.max_neighbors; }
  std::size_t token_dim() const {
    return lags.size() * slots() * num_features + datetime.size() + k_pe;
  }
  void validate() const;
  // Names of the fields that differ from `other` in a way that changes the
  // token layout.
  std::vector<std::string> layout_differences(const FeatureConfig& other) const;

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

// Per-node neighborhoods and positional encodings of one road network.
struct GraphContext {
  std::vector<std::vector<std::size_t>> neighborhoods;
  LaplacianPE pe;

  std::size_t nodes() const { return neighborhoods.size(); }
};
GraphContext prepare_graph(const RoadGraph& graph, const FeatureConfig& cfg);

// Dense T × N × F block of values, time-major.
class Series {
 public:
  Series() = default;
  Series(std::size_t steps, std::size_t nodes, std::size_t features, double fill = 0.0)
      : steps_(steps), nodes_(nodes), features_(features), data_(steps * nodes * features, fill) {}
  Series(std::size_t steps, std::size_t nodes, std::size_t features, std::vector<double> data);

  std::size_t steps() const noexcept { return steps_; }
  std::size_t nodes() const noexcept { return nodes_; }
  std::size_t features() const noexcept { return features_; }

  double& at(std::size_t t, std::size_t n, std::size_t f = 0) {
    return data_[(t * nodes_ + n) * features_ + f];
  }
  double at(std::size_t t, std::size_t n, std::size_t f = 0) const {
    return data_[(t * nodes_ + n) * features_ + f];
  }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  // Rows [begin, end) as a new series.
  Series slice_steps(std::size_t begin, std::size_t end) const;
  void append_step(std::span<const double> values);  // N·F values

  friend bool operator==(const Series&, const Series&) = default;

 private:
  std::size_t steps_ = 0;
  std::size_t nodes_ = 0;
  std::size_t features_ = 0;
  std::vector<double> data_;
};

// Per-channel location/scale: location = mean, scale = max(mean |x|, floor).
struct Scaler {
  std::vector<double> location;
  std::vector<double> scale;
  double floor = 1e-3;

  double apply(double x, std::size_t channel = 0) const {
    return (x - location[channel]) / scale[channel];
  }
  double invert(double z, std::size_t channel = 0) const {
    return z * scale[channel] + location[channel];
  }
};

// `values` holds consecutive rows of `channels` values.
Scaler fit_scaler(std::span<const double> values, std::size_t channels, double floor = 1e-3);
// Fits node n over steps [begin, end).
Scaler fit_scaler(const Series& series, std::size_t node, std::size_t begin, std::size_t end,
                  double floor = 1e-3);

// |L| × F matrix (row-major): entry [j][f] = series[t − L[j]][node][f].
std::vector<double> lag_features(const Series& series, std::size_t node, std::size_t t,
                                 const LagSet& lags);

struct TokenFrame {
  std::vector<double> values;
  std::vector<std::uint8_t> neighbor_mask;  // one entry per slot
};

// Token of `neighborhood[0]` at time t. `scalers`, when given, holds one
// scaler per neighborhood entry applied to that node's lag block.
TokenFrame build_token(const Series& series, std::span<const Timestamp> timestamps,
                       std::size_t t, std::span<const std::size_t> neighborhood,
                       std::span<const double> pe_row, const FeatureConfig& cfg,
                       std::span<const Scaler> scalers = {});

struct Sample {
  std::size_t node = 0;
  std::size_t window_end = 0;     // time of the last target
  std::vector<double> tokens;     // context_length × token_dim, row-major
  std::vector<double> targets;    // context_length; empty for a pure context
  Scaler scaler;                  // center node scaler
};

// Teacher-forced training window ending at `window_end`: position p holds
// the token at τ_p = window_end − C + 1 + p and targets[p] = x[τ_p] of the
// center node. With `scaled`, every channel is normalized by its own node's
// scaler fitted over [window_end − C, window_end) and targets use the center
// scaler.
Sample make_sample(const Series& series, std::span<const Timestamp> timestamps,
                   std::span<const std::size_t> neighborhood, std::span<const double> pe_row,
                   std::size_t window_end, std::size_t context_length, const FeatureConfig& cfg,
                   bool scaled = true);

// Same tokens as make_sample but without targets, so window_end may equal
// series.steps() (the next unseen step); timestamps must cover window_end.
Sample make_context(const Series& series, std::span<const Timestamp> timestamps,
                    std::span<const std::size_t> neighborhood, std::span<const double> pe_row,
                    std::size_t window_end, std::size_t context_length, const FeatureConfig& cfg);

// Smallest history length that admits a window.
inline std::size_t min_history(const FeatureConfig& cfg, std::size_t context_length) {
  return cfg.lags.max_lag() + context_length;
}

// Window ends whose targets all fall in [begin, end) and whose lags exist:
// the inclusive range [first, last], or nullopt when empty.
std::optional<std::pair<std::size_t, std::size_t>> window_end_range(
    std::size_t begin, std::size_t end, const FeatureConfig& cfg, std::size_t context_length);

}  // namespace strada
