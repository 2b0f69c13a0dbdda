#include <gtest/gtest.h>

#include <cmath>

#include "strada/error.hpp"
#include "strada/features.hpp"
#include "strada/rng.hpp"

namespace strada {
namespace {

std::vector<Timestamp> five_minute_clock(std::size_t n, Timestamp start) {
  std::vector<Timestamp> ts(n);
  for (std::size_t i = 0; i < n; ++i) ts[i] = start + std::chrono::minutes(5 * i);
  return ts;
}

Series random_series(std::size_t steps, std::size_t nodes, RngStream& s) {
  Series x(steps, nodes, 1);
  for (auto& v : x.data()) v = 50.0 + 10.0 * s.normal();
  return x;
}

FeatureConfig small_config() {
  FeatureConfig cfg;
  cfg.lags = LagSet({1, 2, 4});
  cfg.hops = {1, 4};
  cfg.k_pe = 2;
  return cfg;
}

TEST(Timestamp, ParseFormatRoundTrip) {
  const Timestamp t = parse_timestamp("2024-03-05T17:45:10Z");
  EXPECT_EQ(format_timestamp(t), "2024-03-05T17:45:10Z");
  EXPECT_EQ(parse_timestamp("2024-03-05 17:45"), parse_timestamp("2024-03-05T17:45:00"));
  EXPECT_THROW(parse_timestamp("2024-02-30T00:00"), InputError);
  EXPECT_THROW(parse_timestamp("yesterday"), InputError);
}

TEST(LagSet, Validation) {
  EXPECT_THROW(LagSet({}), ConfigError);
  EXPECT_THROW(LagSet({0, 1}), ConfigError);
  EXPECT_THROW(LagSet({2, 2}), ConfigError);
  EXPECT_THROW(LagSet({3, 1}), ConfigError);
  const LagSet d = LagSet::traffic_default();
  EXPECT_EQ(d.size(), 18u);
  EXPECT_EQ(d.max_lag(), 288u);
}

TEST(LagFeatures, DirectSubstitution) {
  Series x(4, 1, 1, std::vector<double>{10, 20, 30, 40});
  EXPECT_EQ(lag_features(x, 0, 3, LagSet({1, 2})), (std::vector<double>{30, 20}));
  EXPECT_EQ(lag_features(x, 0, 2, LagSet({1})), (std::vector<double>{20}));
  EXPECT_THROW(lag_features(x, 0, 1, LagSet({1, 2})), InputError);
}

TEST(LagFeatures, MatchesIndexOracle) {
  RngStream s(1, 0);
  Series x(40, 3, 2);
  for (auto& v : x.data()) v = s.normal();
  const LagSet lags({1, 3, 7});
  for (std::size_t t = 7; t < 40; ++t) {
    const auto got = lag_features(x, 2, t, lags);
    const std::size_t offs[] = {1, 3, 7};
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t f = 0; f < 2; ++f) {
        EXPECT_EQ(got[j * 2 + f], x.data()[((t - offs[j]) * 3 + 2) * 2 + f]);
      }
    }
  }
}

TEST(DateTime, Extremes) {
  const auto fields = default_datetime_fields();
  const auto midnight = datetime_features(parse_timestamp("2024-01-01T00:00"), fields);
  EXPECT_EQ(midnight.size(), 7u);
  EXPECT_DOUBLE_EQ(midnight[1], -0.5);  // hour
  EXPECT_DOUBLE_EQ(midnight[2], -0.5);  // 2024-01-01 is a Monday
  EXPECT_DOUBLE_EQ(midnight[4], -0.5);  // day of year
  const auto late = datetime_features(parse_timestamp("2024-12-31T23:55"), fields);
  EXPECT_DOUBLE_EQ(late[1], 0.5);
  EXPECT_DOUBLE_EQ(late[4], 0.5);  // leap year: day index 365
  EXPECT_DOUBLE_EQ(late[5], 0.5);
  EXPECT_DOUBLE_EQ(late[6], 0.5);
  const auto sunday = datetime_features(parse_timestamp("2024-01-07T12:00"), fields);
  EXPECT_DOUBLE_EQ(sunday[2], 0.5);
}

TEST(DateTime, OneStepChangesOnlyFinestField) {
  const auto fields = default_datetime_fields();
  RngStream s(2, 0);
  Timestamp t = parse_timestamp("2024-05-17T10:00");
  for (int i = 0; i < 11; ++i) {
    const auto a = datetime_features(t, fields);
    const auto b = datetime_features(t + std::chrono::minutes(5), fields);
    EXPECT_NE(a[0], b[0]);
    for (std::size_t j = 1; j < 7; ++j) EXPECT_EQ(a[j], b[j]);
    for (double v : a) {
      EXPECT_GE(v, -0.5);
      EXPECT_LE(v, 0.5);
    }
    t += std::chrono::minutes(5);
  }
}

TEST(Token, LengthFormula) {
  FeatureConfig cfg;
  cfg.lags = LagSet({1, 2, 3, 4, 5, 6, 7, 8});
  cfg.hops = {2, 4};
  cfg.k_pe = 4;
  EXPECT_EQ(cfg.token_dim(), 43u);
  cfg.hops = {0, 4};
  EXPECT_EQ(cfg.token_dim(), 8u + 7u + 4u);
}

TEST(Token, PaddingAndLayout) {
  RngStream s(3, 0);
  const FeatureConfig cfg = small_config();
  Series x = random_series(20, 5, s);
  const auto ts = five_minute_clock(20, parse_timestamp("2024-01-01T00:00"));
  const std::vector<std::size_t> nb = {2, 4};
  const std::vector<double> pe = {0.25, -0.75};
  const TokenFrame tok = build_token(x, ts, 10, nb, pe, cfg);
  ASSERT_EQ(tok.values.size(), cfg.token_dim());
  EXPECT_EQ(tok.neighbor_mask, (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_EQ(tok.values[0], x.at(9, 2));
  EXPECT_EQ(tok.values[3], x.at(9, 4));
  EXPECT_EQ(tok.values[5], x.at(6, 4));
  for (std::size_t i = 6; i < 12; ++i) EXPECT_EQ(tok.values[i], 0.0);
  const auto dt = datetime_features(ts[10], cfg.datetime);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(tok.values[12 + i], dt[i]);
  EXPECT_EQ(tok.values[19], 0.25);
  EXPECT_EQ(tok.values[20], -0.75);
}

TEST(Token, NoLookAhead) {
  RngStream s(4, 0);
  const FeatureConfig cfg = small_config();
  Series x = random_series(30, 3, s);
  const auto ts = five_minute_clock(30, parse_timestamp("2024-01-01T00:00"));
  const std::vector<std::size_t> nb = {0, 1, 2};
  const std::vector<double> pe = {0.1, 0.2};
  const TokenFrame a = build_token(x, ts, 12, nb, pe, cfg);
  for (std::size_t t = 12; t < 30; ++t)
    for (std::size_t n = 0; n < 3; ++n) x.at(t, n) = 1e6;
  EXPECT_EQ(build_token(x, ts, 12, nb, pe, cfg).values, a.values);
}

TEST(Scaler, Examples) {
  const Scaler c = fit_scaler(std::vector<double>{5, 5, 5}, 1);
  EXPECT_DOUBLE_EQ(c.scale[0], 5.0);
  EXPECT_DOUBLE_EQ(c.apply(5.0), 0.0);
  const Scaler m = fit_scaler(std::vector<double>{1, -2, 3}, 1);
  EXPECT_NEAR(m.location[0], 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(m.scale[0], 2.0);
  const Scaler z = fit_scaler(std::vector<double>{0, 0}, 1);
  EXPECT_DOUBLE_EQ(z.scale[0], 1e-3);
  RngStream s(5, 0);
  for (int i = 0; i < 1000; ++i) {
    const double v = 1e3 * s.normal();
    EXPECT_NEAR(m.invert(m.apply(v)), v, 1e-9);
  }
}

TEST(Sample, TargetsAndTokens) {
  RngStream s(6, 0);
  const FeatureConfig cfg = small_config();
  Series x = random_series(40, 3, s);
  const auto ts = five_minute_clock(40, parse_timestamp("2024-01-01T00:00"));
  const std::vector<std::size_t> nb = {1, 0, 2};
  const std::vector<double> pe = {0.0, 0.0};
  const std::size_t ctx = 6, end = 20;
  const Sample smp = make_sample(x, ts, nb, pe, end, ctx, cfg);
  ASSERT_EQ(smp.targets.size(), ctx);
  ASSERT_EQ(smp.tokens.size(), ctx * cfg.token_dim());
  for (std::size_t p = 0; p < ctx; ++p) {
    const std::size_t tau = end - ctx + 1 + p;
    EXPECT_NEAR(smp.scaler.invert(smp.targets[p]), x.at(tau, 1), 1e-9);
    // First lag of the center node is the previous target.
    EXPECT_NEAR(smp.scaler.invert(smp.tokens[p * cfg.token_dim()]), x.at(tau - 1, 1), 1e-9);
  }
  const Sample one = make_sample(x, ts, nb, pe, 10, 1, cfg);
  EXPECT_EQ(one.targets.size(), 1u);
  EXPECT_EQ(one.tokens.size(), cfg.token_dim());
  EXPECT_THROW(make_sample(x, ts, nb, pe, 8, 6, cfg), InputError);
  EXPECT_THROW(make_sample(x, ts, nb, pe, 40, 6, cfg), InputError);
  EXPECT_NO_THROW(make_context(x, five_minute_clock(41, ts[0]), nb, pe, 40, 6, cfg));
}

TEST(Sample, SlidingWindowOverlap) {
  RngStream s(7, 0);
  const FeatureConfig cfg = small_config();
  Series x = random_series(50, 3, s);
  const auto ts = five_minute_clock(50, parse_timestamp("2024-01-01T00:00"));
  const std::vector<std::size_t> nb = {0, 2};
  const std::vector<double> pe = {0.5, 0.5};
  const std::size_t ctx = 8, dim = cfg.token_dim();
  const Sample a = make_sample(x, ts, nb, pe, 25, ctx, cfg, false);
  const Sample b = make_sample(x, ts, nb, pe, 26, ctx, cfg, false);
  for (std::size_t p = 0; p + 1 < ctx; ++p) {
    EXPECT_EQ(a.targets[p + 1], b.targets[p]);
    for (std::size_t i = 0; i < dim; ++i) EXPECT_EQ(a.tokens[(p + 1) * dim + i], b.tokens[p * dim + i]);
  }
}

TEST(Sample, NodeScaleInvariance) {
  RngStream s(8, 0);
  const FeatureConfig cfg = small_config();
  Series x = random_series(40, 3, s);
  const auto ts = five_minute_clock(40, parse_timestamp("2024-01-01T00:00"));
  const std::vector<std::size_t> nb = {0, 1, 2};
  const std::vector<double> pe = {0.0, 0.0};
  const Sample a = make_sample(x, ts, nb, pe, 30, 6, cfg);
  Series y = x;
  for (std::size_t t = 0; t < 40; ++t) y.at(t, 1) *= 7.5;
  const Sample b = make_sample(y, ts, nb, pe, 30, 6, cfg);
  const std::size_t dim = cfg.token_dim();
  for (std::size_t p = 0; p < 6; ++p) {
    for (std::size_t i = 0; i < dim; ++i) EXPECT_NEAR(a.tokens[p * dim + i], b.tokens[p * dim + i], 1e-9);
  }
  const Sample ca = make_sample(x, ts, std::vector<std::size_t>{1, 0}, pe, 30, 6, cfg);
  const Sample cb = make_sample(y, ts, std::vector<std::size_t>{1, 0}, pe, 30, 6, cfg);
  EXPECT_NEAR(cb.scaler.scale[0], 7.5 * ca.scaler.scale[0], 1e-9);
}

TEST(Windows, Range) {
  const FeatureConfig cfg = small_config();
  const auto r = window_end_range(0, 30, cfg, 6);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->first, 9u);
  EXPECT_EQ(r->second, 29u);
  const auto mid = window_end_range(20, 30, cfg, 6);
  EXPECT_EQ(mid->first, 25u);
  EXPECT_FALSE(window_end_range(0, 9, cfg, 6));
}

}  // namespace
}  // namespace strada
