#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/students_t.hpp>

#include "strada/model.hpp"
#include "gradcheck.hpp"

namespace strada {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.token_dim = 5;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_dim = 8;
  c.ffn_dim = 24;
  c.context_length = 8;
  return c;
}

Tensor<double> random_tokens(RngStream& s, std::size_t rows, std::size_t dim, double scale = 1.0) {
  Tensor<double> t({rows, dim});
  for (auto& x : t.data()) x = scale * s.normal();
  return t;
}

// Larger weights than the default init so that gradients are not tiny.
ModelParams<double> lively_model(const ModelConfig& c, std::uint64_t seed) {
  RngStream s(seed, 0);
  ModelParams<double> p = init_model<double>(c, s);
  for_each_param(p, [&](const std::string&, Tensor<double>& t, ParamRole role) {
    for (auto& x : t.data()) {
      x = role == ParamRole::weight ? 0.3 * s.normal() : (role == ParamRole::gain ? 1.0 + 0.2 * s.normal() : 0.1 * s.normal());
    }
  });
  return p;
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.head_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.head_dim = 6;
  c.d_model = 18;
  c.n_heads = 3;
  EXPECT_NO_THROW(c.validate());
}

TEST(RmsNorm, Examples) {
  std::vector<double> ones(6, 1.0);
  auto y = rmsnorm<double>(ones, ones, 0.0);
  for (double v : y) EXPECT_DOUBLE_EQ(v, 1.0);
  std::vector<double> x = {3, 4}, g = {1, 1};
  auto r = rmsnorm<double>(x, g, 0.0);
  EXPECT_NEAR(r[0], 3 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(r[0], 0.8485, 1e-4);
  EXPECT_NEAR(r[1], 1.1314, 1e-4);
  std::vector<double> x2 = {7.5, 10};
  auto r2 = rmsnorm<double>(x2, g, 0.0);
  EXPECT_NEAR(r2[0], r[0], 1e-12);
  EXPECT_NEAR(r2[1], r[1], 1e-12);
}

TEST(Rope, IdentityIsometryRelative) {
  RngStream s(1, 0);
  std::vector<double> q(8), k(8);
  for (auto& v : q) v = s.normal();
  for (auto& v : k) v = s.normal();
  EXPECT_EQ(rope_rotate<double>(q, 0, 1e4), q);
  auto norm = [](const std::vector<double>& v) {
    double a = 0;
    for (double x : v) a += x * x;
    return std::sqrt(a);
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double r = 0;
    for (std::size_t i = 0; i < a.size(); ++i) r += a[i] * b[i];
    return r;
  };
  for (std::size_t m : {1u, 5u, 100u}) {
    EXPECT_NEAR(norm(rope_rotate<double>(q, m, 1e4)), norm(q), 1e-12);
    for (std::size_t n : {0u, 3u}) {
      for (std::size_t shift : {1u, 7u, 40u}) {
        EXPECT_NEAR(dot(rope_rotate<double>(q, m, 1e4), rope_rotate<double>(k, n, 1e4)),
                    dot(rope_rotate<double>(q, m + shift, 1e4), rope_rotate<double>(k, n + shift, 1e4)),
                    1e-5);
      }
    }
  }
  std::vector<double> odd(5, 1.0);
  EXPECT_THROW(rope_rotate<double>(odd, 1, 1e4), ConfigError);
}

TEST(Rope, BatchedMatchesSingleVector) {
  RngStream s(2, 0);
  Tape<double> tape;
  Tensor<double> x = random_tokens(s, 6, 8);  // 2 sequences of 3, 2 heads of 4
  Var<double> r = ag::rope(tape.constant(x), 3, 4, 100.0);
  for (std::size_t row = 0; row < 6; ++row) {
    for (std::size_t h = 0; h < 2; ++h) {
      std::vector<double> v(x.row(row).begin() + h * 4, x.row(row).begin() + h * 4 + 4);
      auto rot = rope_rotate<double>(v, row % 3, 100.0);
      for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.value()(row, h * 4 + i), rot[i], 1e-14);
    }
  }
}

TEST(Attention, SingleTokenIsValueProjection) {
  ModelParams<double> p = lively_model(tiny_config(), 3);
  RngStream s(3, 1);
  Tensor<double> x = random_tokens(s, 1, 16);
  Tensor<double> out = causal_attention(p, 0, x);
  // Oracle: x·Wvᵀ·Woᵀ.
  const auto& l = p.layers[0];
  for (std::size_t o = 0; o < 16; ++o) {
    double acc = 0;
    for (std::size_t m = 0; m < 16; ++m) {
      double v = 0;
      for (std::size_t i = 0; i < 16; ++i) v += x[i] * l.wv(m, i);
      acc += v * l.wo(o, m);
    }
    EXPECT_NEAR(out[o], acc, 1e-12);
  }
}

TEST(Attention, CausalAndConvex) {
  ModelParams<double> p = lively_model(tiny_config(), 4);
  RngStream s(4, 1);
  Tensor<double> x = random_tokens(s, 8, 16);
  Tensor<double> base = causal_attention(p, 1, x);
  for (std::size_t j = 0; j < 8; ++j) {
    Tensor<double> y = x;
    for (auto& v : y.row(j)) v += 3.0;
    Tensor<double> out = causal_attention(p, 1, y);
    for (std::size_t r = 0; r < j; ++r) {
      for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(out(r, c), base(r, c));
    }
  }
  // Identical value rows: every output row equals that common value.
  Tape<double> tape;
  Tensor<double> q = random_tokens(s, 8, 16), k = random_tokens(s, 8, 16);
  Tensor<double> v({8, 16});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 16; ++c) v(r, c) = 0.1 * static_cast<double>(c) - 0.7;
  Var<double> o = ag::causal_attention(tape.constant(q), tape.constant(k), tape.constant(v), 8, 2);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(o.value()(r, c), v(r, c), 1e-12);
}

TEST(Forward, ZeroHeadGivesConstantDistribution) {
  ModelParams<double> p = lively_model(tiny_config(), 5);
  p.head_w.fill(0.0);
  p.head_b.fill(0.0);
  RngStream s(5, 1);
  auto dists = forward_sequence(p, random_tokens(s, 8, 5));
  ASSERT_EQ(dists.size(), 8u);
  for (const auto& d : dists) {
    EXPECT_NEAR(d.nu, std::log(2.0) + 1e-3, 1e-12);
    EXPECT_NEAR(d.nu, 0.6941, 1e-4);
    EXPECT_NEAR(d.sigma, std::log(2.0) + 1e-4, 1e-12);
    EXPECT_EQ(d.mu, 0.0);
  }
}

TEST(Forward, CausalityAndFiniteness) {
  ModelParams<double> p = lively_model(tiny_config(), 6);
  RngStream s(6, 1);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> x({8, 5});
    for (auto& v : x.data()) v = -10.0 + 20.0 * s.uniform();
    auto base = forward_sequence(p, x);
    for (const auto& d : base) {
      EXPECT_TRUE(std::isfinite(d.nu) && std::isfinite(d.mu) && std::isfinite(d.sigma));
      EXPECT_GT(d.nu, 0.0);
      EXPECT_GT(d.sigma, 0.0);
    }
    const std::size_t j = 2 + trial;
    for (std::size_t r = j; r < 8; ++r)
      for (auto& v : x.row(r)) v = -v + 1.0;
    auto pert = forward_sequence(p, x);
    for (std::size_t r = 0; r < j; ++r) {
      EXPECT_EQ(pert[r].nu, base[r].nu);
      EXPECT_EQ(pert[r].mu, base[r].mu);
      EXPECT_EQ(pert[r].sigma, base[r].sigma);
    }
  }
  Tensor<double> wrong({8, 6});
  EXPECT_THROW(forward_sequence(p, wrong), ConfigError);
}

TEST(Forward, BatchedEqualsPerSequence) {
  ModelParams<double> p = lively_model(tiny_config(), 7);
  RngStream s(7, 1);
  Tensor<double> a = random_tokens(s, 8, 5), b = random_tokens(s, 8, 5);
  auto joint = forward(p, concat(a, b, 0), 8);
  auto fa = forward(p, a, 8);
  auto fb = forward(p, b, 8);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(joint.head(r, c), fa.head(r, c), 1e-12);
      EXPECT_NEAR(joint.head(8 + r, c), fb.head(r, c), 1e-12);
    }
  }
}

TEST(StudentT, NllExamples) {
  EXPECT_NEAR(student_t_nll({1.0, 0.0, 1.0}, 0.0), std::log(std::numbers::pi), 1e-12);
  EXPECT_NEAR(student_t_nll({1e6, 2.0, 1.0}, 3.0), 0.5 * std::log(2 * std::numbers::pi) + 0.5, 1e-3);
  EXPECT_THROW(student_t_nll({3.0, 0.0, 1.0}, std::nan("")), InputError);
  RngStream s(8, 0);
  for (int i = 0; i < 10000; ++i) {
    const double nu = 0.01 + 20 * s.uniform(), mu = 5 * s.normal(), sigma = 0.01 + 3 * s.uniform();
    const double y = mu + sigma * 4 * s.normal();
    EXPECT_NEAR(student_t_nll({nu, mu, sigma}, y),
                student_t_nll({nu, 0.0, 1.0}, (y - mu) / sigma) + std::log(sigma), 1e-9);
  }
}

TEST(StudentT, NllMatchesBoostDensity) {
  RngStream s(9, 0);
  for (int i = 0; i < 200; ++i) {
    const double nu = 0.5 + 30 * s.uniform(), mu = s.normal(), sigma = 0.1 + s.uniform();
    const double y = mu + 3 * s.normal();
    boost::math::students_t dist(nu);
    const double ref = -std::log(boost::math::pdf(dist, (y - mu) / sigma) / sigma);
    EXPECT_NEAR(student_t_nll({nu, mu, sigma}, y), ref, 1e-9);
  }
}

TEST(StudentT, Sampling) {
  RngStream a(10, 3), b(10, 3);
  const StudentTParams p{4.0, 1.5, 2.0};
  EXPECT_EQ(sample_student_t(p, a), sample_student_t(p, b));

  RngStream s(11, 0);
  std::vector<double> draws(100000);
  for (auto& d : draws) d = sample_student_t(p, s);
  std::nth_element(draws.begin(), draws.begin() + 50000, draws.end());
  EXPECT_NEAR(draws[50000], p.mu, 0.02 * p.sigma);
  // The 90% quantile against the exact distribution.
  std::nth_element(draws.begin(), draws.begin() + 90000, draws.end());
  const double q90 = p.mu + p.sigma * boost::math::quantile(boost::math::students_t(p.nu), 0.9);
  EXPECT_NEAR(draws[90000], q90, 0.05);

  const StudentTParams tight{1e8, -3.0, 1e-4};
  int close = 0;
  for (int i = 0; i < 10000; ++i) close += std::abs(sample_student_t(tight, s) - tight.mu) < 1e-3;
  EXPECT_GE(close, 9900);
}

TEST(Parameters, CountMatchesFormula) {
  for (std::size_t layers : {1u, 2u, 4u}) {
    ModelConfig c = tiny_config();
    c.n_layers = layers;
    RngStream s(12, layers);
    auto p = init_model<float>(c, s);
    EXPECT_EQ(count_parameters(p), parameter_count_formula(c));
  }
  ModelConfig c = tiny_config();
  RngStream s(13, 0);
  auto p1 = init_model<float>(c, s);
  c.n_layers *= 2;
  auto p2 = init_model<float>(c, s);
  const std::size_t per_layer = 4 * 16 * 16 + 2 * 16 * 24 + 2 * 16;
  EXPECT_EQ(count_parameters(p2) - count_parameters(p1), tiny_config().n_layers * per_layer);
  EXPECT_EQ(count_parameters(p1, [](const std::string& n) { return n.rfind("head.", 0) == 0; }),
            3u * 16u + 3u);

  ModelConfig desk;
  desk.token_dim = 18 * 8 + 7 + 4;
  RngStream d(14, 0);
  EXPECT_EQ(count_parameters(init_model<float>(desk, d)), parameter_count_formula(desk));
}

TEST(Parameters, InitConventions) {
  RngStream s(15, 0);
  auto p = init_model<double>(tiny_config(), s);
  for (double g : p.final_norm.data()) EXPECT_EQ(g, 1.0);
  for (double b : p.head_b.data()) EXPECT_EQ(b, 0.0);
  for (double w : p.layers[0].wq.data()) EXPECT_LE(std::abs(w), 0.04);
}

TEST(Parameters, CastRoundTrip) {
  RngStream s(16, 0);
  auto p = init_model<double>(tiny_config(), s);
  auto f = p.cast<float>();
  EXPECT_EQ(count_parameters(f), count_parameters(p));
  EXPECT_FLOAT_EQ(f.layers[1].w_up(3, 4), static_cast<float>(p.layers[1].w_up(3, 4)));
}

// Batch NLL gradient against central differences over every parameter, at
// the model's own initialization.
TEST(Gradient, FullModelNll) {
  ModelConfig c = tiny_config();
  c.token_dim = 19;
  RngStream s(17, 0);
  const ModelParams<double> p = init_model<double>(c, s);
  Tensor<double> tokens = random_tokens(s, 16, c.token_dim);
  std::vector<double> y(16);
  for (auto& v : y) v = s.normal();

  std::vector<Tensor<double>> flat;
  for_each_param(p, [&](const std::string&, const Tensor<double>& t, ParamRole) { flat.push_back(t); });
  auto loss = [&](Tape<double>& tape, std::span<const Var<double>> vars) {
    return sequence_nll(p, assemble_vars(p, vars), tape.constant(tokens), std::span<const double>(y), 8);
  };
  auto analytic = gradient<double>(loss, flat);
  auto numeric = testing::numeric_gradient(loss, flat, 1e-4);
  EXPECT_LT(testing::max_tensor_relative_error(analytic, numeric), 1e-6);

  // Same loss in 32-bit against the 64-bit differences.
  const ModelParams<float> pf = p.cast<float>();
  std::vector<Tensor<float>> flat_f;
  for_each_param(pf, [&](const std::string&, const Tensor<float>& t, ParamRole) { flat_f.push_back(t); });
  const Tensor<float> tokens_f = tokens.cast<float>();
  const std::vector<float> y_f(y.begin(), y.end());
  auto grads_f = gradient<float>(
      [&](Tape<float>& tape, std::span<const Var<float>> vars) {
        return sequence_nll(pf, assemble_vars(pf, vars), tape.constant(tokens_f),
                            std::span<const float>(y_f), 8);
      },
      flat_f);
  std::vector<Tensor<double>> widened;
  for (const auto& g : grads_f) widened.push_back(g.cast<double>());
  EXPECT_LT(testing::max_tensor_relative_error(widened, numeric), 1e-4);
}

}  // namespace
}  // namespace strada
