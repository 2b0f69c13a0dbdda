#include "strada/features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "strada/error.hpp"
#include "strada/textio.hpp"

namespace strada {

namespace {

int parse_fixed(std::string_view text, std::size_t pos, std::size_t len, std::string_view whole) {
  int v = 0;
  if (pos + len > text.size()) throw InputError("malformed timestamp '" + std::string(whole) + "'");
  for (std::size_t i = pos; i < pos + len; ++i) {
    const char c = text[i];
    if (c < '0' || c > '9') throw InputError("malformed timestamp '" + std::string(whole) + "'");
    v = v * 10 + (c - '0');
  }
  return v;
}

constexpr std::array<std::string_view, 8> kFieldNames = {
    "second_of_minute", "minute_of_hour", "hour_of_day",   "day_of_week",
    "day_of_month",     "day_of_year",    "month_of_year", "quarter_of_year"};
constexpr std::array<std::size_t, 8> kCardinality = {60, 60, 24, 7, 31, 366, 12, 4};

}  // namespace

Timestamp parse_timestamp(std::string_view text) {
  using namespace std::chrono;
  const std::string_view whole = text;
  text = text::trim(text);
  if (!text.empty() && (text.back() == 'Z' || text.back() == 'z')) text.remove_suffix(1);
  if (text.size() < 16 || text[4] != '-' || text[7] != '-' || (text[10] != 'T' && text[10] != ' ') ||
      text[13] != ':') {
    throw InputError("malformed timestamp '" + std::string(whole) + "'");
  }
  const int y = parse_fixed(text, 0, 4, whole);
  const int mo = parse_fixed(text, 5, 2, whole);
  const int d = parse_fixed(text, 8, 2, whole);
  const int h = parse_fixed(text, 11, 2, whole);
  const int mi = parse_fixed(text, 14, 2, whole);
  int s = 0;
  if (text.size() > 16) {
    if (text.size() != 19 || text[16] != ':') {
      throw InputError("malformed timestamp '" + std::string(whole) + "'");
    }
    s = parse_fixed(text, 17, 2, whole);
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 59) {
    throw InputError("invalid timestamp '" + std::string(whole) + "'");
  }
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

std::string format_timestamp(Timestamp ts) {
  using namespace std::chrono;
  const auto dp = floor<days>(ts);
  const year_month_day ymd{dp};
  const hh_mm_ss tod{ts - dp};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(tod.hours().count()), static_cast<int>(tod.minutes().count()),
                static_cast<int>(tod.seconds().count()));
  return buf;
}

LagSet::LagSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
  if (indices_.empty()) throw ConfigError("lag set must not be empty");
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] == 0) throw ConfigError("lag indices must be >= 1");
    if (i > 0 && indices_[i] <= indices_[i - 1]) {
      throw ConfigError("lag indices must be strictly increasing");
    }
  }
}

LagSet LagSet::traffic_default() {
  return LagSet({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 24, 48, 72, 96, 144, 288});
}

std::string_view to_string(DateTimeField field) {
  return kFieldNames[static_cast<std::size_t>(field)];
}

DateTimeField parse_datetime_field(std::string_view name) {
  for (std::size_t i = 0; i < kFieldNames.size(); ++i) {
    if (kFieldNames[i] == name) return static_cast<DateTimeField>(i);
  }
  throw ConfigError("unknown date-time field '" + std::string(name) + "'");
}

std::size_t cardinality(DateTimeField field) {
  return kCardinality[static_cast<std::size_t>(field)];
}

std::vector<DateTimeField> default_datetime_fields() {
  return {DateTimeField::minute_of_hour, DateTimeField::hour_of_day,
          DateTimeField::day_of_week,    DateTimeField::day_of_month,
          DateTimeField::day_of_year,    DateTimeField::month_of_year,
          DateTimeField::quarter_of_year};
}

std::vector<double> datetime_features(Timestamp ts, std::span<const DateTimeField> fields) {
  using namespace std::chrono;
  const auto dp = floor<days>(ts);
  const year_month_day ymd{dp};
  const hh_mm_ss tod{ts - dp};
  std::vector<double> out;
  out.reserve(fields.size());
  for (const DateTimeField f : fields) {
    long idx = 0;
    switch (f) {
      case DateTimeField::second_of_minute: idx = tod.seconds().count(); break;
      case DateTimeField::minute_of_hour: idx = tod.minutes().count(); break;
      case DateTimeField::hour_of_day: idx = tod.hours().count(); break;
      case DateTimeField::day_of_week: idx = weekday{dp}.iso_encoding() - 1; break;
      case DateTimeField::day_of_month: idx = static_cast<unsigned>(ymd.day()) - 1; break;
      case DateTimeField::day_of_year:
        idx = (dp - sys_days{ymd.year() / January / 1}).count();
        break;
      case DateTimeField::month_of_year: idx = static_cast<unsigned>(ymd.month()) - 1; break;
      case DateTimeField::quarter_of_year: idx = (static_cast<unsigned>(ymd.month()) - 1) / 3; break;
    }
    out.push_back(static_cast<double>(idx) / static_cast<double>(cardinality(f) - 1) - 0.5);
  }
  return out;
}

void FeatureConfig::validate() const {
  if (hops.max_neighbors == 0) throw ConfigError("max_neighbors must be >= 1");
  if (num_features == 0) throw ConfigError("num_features must be >= 1");
  if (!(scale_floor > 0.0)) throw ConfigError("scale_floor must be positive");
}

std::vector<std::string> FeatureConfig::layout_differences(const FeatureConfig& other) const {
  std::vector<std::string> diff;
  if (lags != other.lags) diff.emplace_back("lags");
  if (slots() != other.slots()) diff.emplace_back("max_neighbors");
  if (datetime != other.datetime) diff.emplace_back("datetime");
  if (k_pe != other.k_pe) diff.emplace_back("k_pe");
  if (num_features != other.num_features) diff.emplace_back("num_features");
  return diff;
}

GraphContext prepare_graph(const RoadGraph& graph, const FeatureConfig& cfg) {
  cfg.validate();
  GraphContext ctx;
  ctx.neighborhoods.reserve(graph.num_nodes());
  for (std::size_t v = 0; v < graph.num_nodes(); ++v) {
    ctx.neighborhoods.push_back(khop_neighborhood(graph, v, cfg.hops));
  }
  ctx.pe = laplacian_pe(graph, cfg.k_pe);
  return ctx;
}

Series::Series(std::size_t steps, std::size_t nodes, std::size_t features, std::vector<double> data)
    : steps_(steps), nodes_(nodes), features_(features), data_(std::move(data)) {
  if (data_.size() != steps * nodes * features) {
    throw DimensionError("series data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(steps) + "x" +
                         std::to_string(nodes) + "x" + std::to_string(features));
  }
}

Series Series::slice_steps(std::size_t begin, std::size_t end) const {
  if (begin > end || end > steps_) {
    throw DimensionError("series slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + std::to_string(steps_) + " steps");
  }
  const std::size_t row = nodes_ * features_;
  return Series(end - begin, nodes_, features_,
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                    data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

void Series::append_step(std::span<const double> values) {
  if (values.size() != nodes_ * features_) {
    throw DimensionError("append_step: expected " + std::to_string(nodes_ * features_) +
                         " values, got " + std::to_string(values.size()));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++steps_;
}

Scaler fit_scaler(std::span<const double> values, std::size_t channels, double floor) {
  if (channels == 0 || values.empty() || values.size() % channels != 0) {
    throw InputError("fit_scaler: need a non-empty whole number of rows");
  }
  const std::size_t n = values.size() / channels;
  Scaler s;
  s.floor = floor;
  s.location.assign(channels, 0.0);
  s.scale.assign(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0, abs_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum += values[i * channels + c];
      abs_sum += std::abs(values[i * channels + c]);
    }
    s.location[c] = sum / static_cast<double>(n);
    s.scale[c] = std::max(abs_sum / static_cast<double>(n), floor);
  }
  return s;
}

Scaler fit_scaler(const Series& series, std::size_t node, std::size_t begin, std::size_t end,
                  double floor) {
  if (node >= series.nodes() || begin >= end || end > series.steps()) {
    throw InputError("fit_scaler: window out of range");
  }
  const std::size_t f = series.features();
  std::vector<double> window;
  window.reserve((end - begin) * f);
  for (std::size_t t = begin; t < end; ++t) {
    for (std::size_t c = 0; c < f; ++c) window.push_back(series.at(t, node, c));
  }
  return fit_scaler(window, f, floor);
}

std::vector<double> lag_features(const Series& series, std::size_t node, std::size_t t,
                                 const LagSet& lags) {
  if (node >= series.nodes()) throw InputError("lag_features: node out of range");
  if (t < lags.max_lag()) {
    throw InputError("lag_features: t=" + std::to_string(t) + " is smaller than max lag " +
                     std::to_string(lags.max_lag()));
  }
  if (t > series.steps()) throw InputError("lag_features: t beyond the end of the series");
  const std::size_t f = series.features();
  std::vector<double> out(lags.size() * f);
  for (std::size_t j = 0; j < lags.size(); ++j) {
    for (std::size_t c = 0; c < f; ++c) out[j * f + c] = series.at(t - lags.indices()[j], node, c);
  }
  return out;
}

TokenFrame build_token(const Series& series, std::span<const Timestamp> timestamps,
                       std::size_t t, std::span<const std::size_t> neighborhood,
                       std::span<const double> pe_row, const FeatureConfig& cfg,
                       std::span<const Scaler> scalers) {
  const std::size_t slots = cfg.slots();
  const std::size_t f = series.features();
  if (f != cfg.num_features) {
    throw DimensionError("series has " + std::to_string(f) + " features, config expects " +
                         std::to_string(cfg.num_features));
  }
  if (neighborhood.empty()) throw InputError("build_token: empty neighborhood");
  if (neighborhood.size() > slots) {
    throw InputError("build_token: neighborhood of " + std::to_string(neighborhood.size()) +
                     " exceeds " + std::to_string(slots) + " slots");
  }
  if (pe_row.size() != cfg.k_pe) {
    throw DimensionError("build_token: positional encoding has " + std::to_string(pe_row.size()) +
                         " entries, expected " + std::to_string(cfg.k_pe));
  }
  if (!scalers.empty() && scalers.size() != neighborhood.size()) {
    throw InputError("build_token: one scaler per neighbor required");
  }
  if (t >= timestamps.size()) throw InputError("build_token: no timestamp for t");

  TokenFrame frame;
  frame.values.assign(cfg.token_dim(), 0.0);
  frame.neighbor_mask.assign(slots, 0);
  const std::size_t block = cfg.lags.size() * f;
  for (std::size_t m = 0; m < neighborhood.size(); ++m) {
    std::vector<double> lags = lag_features(series, neighborhood[m], t, cfg.lags);
    if (!scalers.empty()) {
      for (std::size_t i = 0; i < lags.size(); ++i) lags[i] = scalers[m].apply(lags[i], i % f);
    }
    std::copy(lags.begin(), lags.end(),
              frame.values.begin() + static_cast<std::ptrdiff_t>(m * block));
    frame.neighbor_mask[m] = 1;
  }
  const std::vector<double> dt = datetime_features(timestamps[t], cfg.datetime);
  auto out = frame.values.begin() + static_cast<std::ptrdiff_t>(slots * block);
  out = std::copy(dt.begin(), dt.end(), out);
  std::copy(pe_row.begin(), pe_row.end(), out);
  return frame;
}

namespace {

Sample assemble(const Series& series, std::span<const Timestamp> timestamps,
                std::span<const std::size_t> neighborhood, std::span<const double> pe_row,
                std::size_t window_end, std::size_t context_length, const FeatureConfig& cfg,
                bool scaled, bool with_targets) {
  if (context_length == 0) throw ConfigError("context_length must be >= 1");
  if (neighborhood.empty()) throw InputError("make_sample: empty neighborhood");
  if (window_end + 1 < min_history(cfg, context_length)) {
    throw InputError("make_sample: window ending at " + std::to_string(window_end) +
                     " needs at least " + std::to_string(min_history(cfg, context_length)) +
                     " steps of history");
  }
  const std::size_t limit = with_targets ? series.steps() : series.steps() + 1;
  if (window_end >= limit) {
    throw InputError("make_sample: window end " + std::to_string(window_end) +
                     " beyond series of " + std::to_string(series.steps()) + " steps");
  }
  const std::size_t first = window_end + 1 - context_length;

  Sample s;
  s.node = neighborhood[0];
  s.window_end = window_end;
  std::vector<Scaler> scalers;
  if (scaled) {
    scalers.reserve(neighborhood.size());
    for (const std::size_t u : neighborhood) {
      scalers.push_back(fit_scaler(series, u, window_end - context_length, window_end,
                                   cfg.scale_floor));
    }
    s.scaler = scalers.front();
  } else {
    s.scaler.location.assign(series.features(), 0.0);
    s.scaler.scale.assign(series.features(), 1.0);
    s.scaler.floor = cfg.scale_floor;
  }

  const std::size_t dim = cfg.token_dim();
  s.tokens.reserve(context_length * dim);
  for (std::size_t p = 0; p < context_length; ++p) {
    const TokenFrame frame =
        build_token(series, timestamps, first + p, neighborhood, pe_row, cfg, scalers);
    s.tokens.insert(s.tokens.end(), frame.values.begin(), frame.values.end());
  }
  if (with_targets) {
    s.targets.resize(context_length);
    for (std::size_t p = 0; p < context_length; ++p) {
      s.targets[p] = s.scaler.apply(series.at(first + p, s.node, 0), 0);
    }
  }
  return s;
}

}  // namespace

Sample make_sample(const Series& series, std::span<const Timestamp> timestamps,
                   std::span<const std::size_t> neighborhood, std::span<const double> pe_row,
                   std::size_t window_end, std::size_t context_length, const FeatureConfig& cfg,
                   bool scaled) {
  return assemble(series, timestamps, neighborhood, pe_row, window_end, context_length, cfg,
                  scaled, true);
}

Sample make_context(const Series& series, std::span<const Timestamp> timestamps,
                    std::span<const std::size_t> neighborhood, std::span<const double> pe_row,
                    std::size_t window_end, std::size_t context_length, const FeatureConfig& cfg) {
  return assemble(series, timestamps, neighborhood, pe_row, window_end, context_length, cfg, true,
                  false);
}

std::optional<std::pair<std::size_t, std::size_t>> window_end_range(
    std::size_t begin, std::size_t end, const FeatureConfig& cfg, std::size_t context_length) {
  const std::size_t first_token = std::max(begin, cfg.lags.max_lag());
  const std::size_t lo = first_token + context_length - 1;
  if (end == 0 || lo > end - 1) return std::nullopt;
  return std::make_pair(lo, end - 1);
}

}  // namespace strada
