#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "strada/datahub.hpp"
#include "strada/error.hpp"
#include "strada/rng.hpp"

namespace strada {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("strada_datahub_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename Fn>
std::string error_message(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

TEST(Split, HundredSteps) {
  const Splits s = chronological_split(100);
  EXPECT_EQ(s.train, (Range{0, 70}));
  EXPECT_EQ(s.val, (Range{70, 90}));
  EXPECT_EQ(s.test, (Range{90, 100}));
}

TEST(Split, RatiosMustBePositiveAndSumToOne) {
  EXPECT_THROW(chronological_split(100, 1.0, 0.0, 0.0), InputError);
  EXPECT_THROW(chronological_split(100, 0.5, 0.3, 0.3), InputError);
  EXPECT_NO_THROW(chronological_split(100, 0.6, 0.3, 0.1));
}

TEST(Split, CoversRangeWithoutOverlap) {
  RngStream rng(11, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t steps = 20 + rng.below(5000);
    const Splits s = chronological_split(steps);
    std::vector<int> hits(steps, 0);
    for (const Range& r : {s.train, s.val, s.test}) {
      for (std::size_t t = r.begin; t < r.end; ++t) ++hits[t];
    }
    for (std::size_t t = 0; t < steps; ++t) ASSERT_EQ(hits[t], 1) << "T=" << steps << " t=" << t;
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, steps);
  }
}

TEST(Split, TooShortForMinimumPoints) {
  EXPECT_THROW(chronological_split(100, 0.7, 0.2, 0.1, 11), DataError);
  EXPECT_NO_THROW(chronological_split(100, 0.7, 0.2, 0.1, 10));
}

TEST(Dataset, LoadsSmallFile) {
  const auto dir = scratch("small");
  write_file(dir / "series.csv",
             "timestamp,node_0,node_1\n"
             "2024-01-01T00:00:00Z,1.5,2\n"
             "2024-01-01T00:05:00Z,3,4.25\n"
             "2024-01-01T00:10:00Z,5,6\n");
  write_file(dir / "edges.csv", "0,1,1\n");
  const auto b = load_dataset(dir / "series.csv", dir / "edges.csv");
  EXPECT_EQ(b.steps(), 3u);
  EXPECT_EQ(b.splits, Splits{});
  EXPECT_EQ(b.nodes(), 2u);
  EXPECT_EQ(b.series.features(), 1u);
  EXPECT_EQ(b.series.at(1, 1), 4.25);
  EXPECT_EQ(b.frequency, std::chrono::seconds(300));
  EXPECT_EQ(format_timestamp(b.time_at(4)), "2024-01-01T00:20:00Z");
}

TEST(Dataset, RejectsDuplicateTimestampWithLine) {
  const auto dir = scratch("dup");
  write_file(dir / "series.csv",
             "timestamp,node_0,node_1\n"
             "2024-01-01T00:00:00Z,1,2\n"
             "2024-01-01T00:00:00Z,3,4\n");
  write_file(dir / "edges.csv", "0,1,1\n");
  const auto msg = error_message([&] { load_dataset(dir / "series.csv", dir / "edges.csv"); });
  EXPECT_NE(msg.find("series.csv:3"), std::string::npos) << msg;
  EXPECT_THROW(load_dataset(dir / "series.csv", dir / "edges.csv"), DataError);
}

TEST(Dataset, RejectsRaggedIrregularAndMismatchedFiles) {
  const auto dir = scratch("bad");
  write_file(dir / "edges.csv", "0,1,1\n");
  write_file(dir / "ragged.csv",
             "timestamp,node_0,node_1\n2024-01-01T00:00:00Z,1,2\n2024-01-01T00:05:00Z,3\n");
  EXPECT_NE(error_message([&] { load_dataset(dir / "ragged.csv", dir / "edges.csv"); }).find(":3"),
            std::string::npos);
  write_file(dir / "gap.csv",
             "timestamp,node_0,node_1\n2024-01-01T00:00:00Z,1,2\n2024-01-01T00:05:00Z,3,4\n"
             "2024-01-01T00:15:00Z,3,4\n");
  EXPECT_NE(error_message([&] { load_dataset(dir / "gap.csv", dir / "edges.csv"); }).find(":4"),
            std::string::npos);
  write_file(dir / "edges3.csv", "0,2,1\n");
  write_file(dir / "ok.csv", "timestamp,node_0,node_1\n2024-01-01T00:00:00Z,1,2\n");
  EXPECT_THROW(load_dataset(dir / "ok.csv", dir / "edges3.csv"), DataError);
}

TEST(Dataset, DirectoryRoundTrip) {
  auto b = synth_generate(3, 5, 600);
  const auto dir = scratch("roundtrip");
  save_dataset_dir(b, dir, R"({"generator":{"seed":3}})");
  const auto back = load_dataset_dir(dir);
  ASSERT_EQ(back.steps(), b.steps());
  ASSERT_EQ(back.nodes(), b.nodes());
  double worst = 0.0;
  for (std::size_t i = 0; i < b.series.data().size(); ++i) {
    worst = std::max(worst, std::abs(back.series.data()[i] - b.series.data()[i]));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_EQ(back.timestamps, b.timestamps);
  EXPECT_EQ(back.splits, b.splits);
  EXPECT_EQ(back.name, b.name);
  EXPECT_TRUE(back.graph.adjacency().isApprox(b.graph.adjacency()));
}

// Least-squares fit of x_{t+1} on [x_t, (Âx)_t, sin ωt, cos ωt, 1] for one
// node; returns the coefficients and the residual.
struct Fit {
  Eigen::VectorXd coef;
  Eigen::VectorXd residual;
};

Fit fit_dynamics(const DatasetBundle& b, std::size_t node, std::size_t period, bool with_neighbors) {
  const auto n = static_cast<Eigen::Index>(b.steps() - 1);
  const Eigen::Index cols = with_neighbors ? 5 : 4;
  Eigen::MatrixXd a(n, cols);
  Eigen::VectorXd y(n);
  const double w = 2.0 * M_PI / static_cast<double>(period);
  const auto& adj = b.graph.adjacency();
  const double deg = b.graph.degrees()(static_cast<Eigen::Index>(node));
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    Eigen::Index c = 0;
    a(t, c++) = b.series.at(ts, node);
    if (with_neighbors) {
      double mix = 0.0;
      for (std::size_t u = 0; u < b.nodes(); ++u) {
        mix += adj(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(u)) * b.series.at(ts, u);
      }
      a(t, c++) = mix / deg;
    }
    a(t, c++) = std::sin(w * static_cast<double>(t));
    a(t, c++) = std::cos(w * static_cast<double>(t));
    a(t, c++) = 1.0;
    y(t) = b.series.at(ts + 1, node);
  }
  Fit f;
  f.coef = a.colPivHouseholderQr().solve(y);
  f.residual = y - a * f.coef;
  return f;
}

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

TEST(Synth, UncoupledNoiselessNodesFollowOwnDynamics) {
  SynthParams p;
  p.beta = 0.0;
  p.noise_sigma = 0.0;
  const auto b = synth_generate(5, 6, 1000, p);
  for (std::size_t v = 0; v < b.nodes(); ++v) {
    EXPECT_LT(fit_dynamics(b, v, p.period, false).residual.cwiseAbs().maxCoeff(), 1e-9) << v;
  }
}

TEST(Synth, UncoupledInnovationsAreUncorrelated) {
  SynthParams p;
  p.beta = 0.0;
  const auto b = synth_generate(5, 6, 4000, p);
  const auto r0 = fit_dynamics(b, 0, p.period, false).residual;
  for (std::size_t v = 1; v < b.nodes(); ++v) {
    EXPECT_LT(std::abs(correlation(r0, fit_dynamics(b, v, p.period, false).residual)), 0.08) << v;
  }
}

TEST(Synth, RegressionRecoversCoupling) {
  for (double beta : {0.0, 0.2}) {
    SynthParams p;
    p.beta = beta;
    const auto b = synth_generate(8, 6, 4000, p);
    for (std::size_t v = 0; v < b.nodes(); ++v) {
      const Fit f = fit_dynamics(b, v, p.period, true);
      EXPECT_NEAR(f.coef(0), p.alpha, 0.05) << "beta=" << beta << " node " << v;
      EXPECT_NEAR(f.coef(1), beta, 0.05) << "beta=" << beta << " node " << v;
    }
  }
}

TEST(Synth, FixedPointIsConstant) {
  SynthParams p;
  p.alpha = 1.0;
  p.beta = 0.0;
  p.amplitude = 0.0;
  p.noise_sigma = 0.0;
  const auto b = synth_generate(9, 4, 500, p);
  for (double v : b.series.data()) EXPECT_EQ(v, p.level);
}

double autocorrelation(const Series& x, std::size_t node, std::size_t lag) {
  const std::size_t n = x.steps();
  Eigen::VectorXd a(static_cast<Eigen::Index>(n - lag)), b(static_cast<Eigen::Index>(n - lag));
  for (std::size_t t = 0; t + lag < n; ++t) {
    a(static_cast<Eigen::Index>(t)) = x.at(t, node);
    b(static_cast<Eigen::Index>(t)) = x.at(t + lag, node);
  }
  return correlation(a, b);
}

TEST(Synth, DailyAutocorrelationBeatsHalfDay) {
  const auto b = synth_generate(7, 12, 4000);
  for (std::size_t v = 0; v < b.nodes(); ++v) {
    EXPECT_GT(autocorrelation(b.series, v, 288), autocorrelation(b.series, v, 144)) << v;
  }
}

TEST(Synth, DeterministicPositiveAndConnected) {
  const auto a = synth_generate(21, 8, 700);
  const auto b = synth_generate(21, 8, 700);
  EXPECT_TRUE(std::equal(a.series.data().begin(), a.series.data().end(), b.series.data().begin()));
  EXPECT_EQ(a.graph.adjacency(), b.graph.adjacency());
  EXPECT_TRUE(a.graph.connected());
  EXPECT_GT(*std::min_element(a.series.data().begin(), a.series.data().end()), 0.0);
  const auto c = synth_generate(22, 8, 700);
  EXPECT_FALSE(std::equal(a.series.data().begin(), a.series.data().end(), c.series.data().begin()));
}

TEST(Synth, RejectsBadInputs) {
  SynthParams p;
  p.alpha = 0.9;
  p.beta = 0.2;
  EXPECT_THROW(synth_generate(1, 4, 500, p), ConfigError);
  EXPECT_THROW(synth_generate(1, 1, 500), InputError);
  EXPECT_THROW(synth_generate(1, 4, 499), InputError);
  SynthParams tiny;
  tiny.radius = 1e-6;
  tiny.max_graph_draws = 3;
  EXPECT_THROW(synth_generate(1, 4, 500, tiny), DataError);
}

CheckpointData sample_checkpoint() {
  RngStream rng(4, 0);
  CheckpointData d;
  d.config = R"({"model":{"d_model":16}})";
  for (const auto& [name, shape] : {std::pair<std::string, Shape>{"embed", {3, 16}}, {"head.bias", {3}}}) {
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    d.tensors.push_back({name, t});
  }
  Tensor<float> a({16, 2});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(rng.normal());
  d.adapters.push_back({"layer0.wq.lora_a", a});
  d.tensors[0].tensor[5] = -0.0f;
  d.tensors[0].tensor[6] = std::numeric_limits<float>::denorm_min();
  return d;
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto dir = scratch("ckpt");
  const auto d = sample_checkpoint();
  save_checkpoint(d, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.config, d.config);
  ASSERT_EQ(back.tensors.size(), d.tensors.size());
  ASSERT_EQ(back.adapters.size(), 1u);
  for (std::size_t i = 0; i < d.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, d.tensors[i].name);
    EXPECT_EQ(back.tensors[i].tensor.shape(), d.tensors[i].tensor.shape());
    EXPECT_EQ(std::memcmp(back.tensors[i].tensor.data().data(), d.tensors[i].tensor.data().data(),
                          d.tensors[i].tensor.size() * sizeof(float)),
              0);
  }
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, SavesAreByteIdentical) {
  const auto dir = scratch("ckpt_twice");
  const auto d = sample_checkpoint();
  save_checkpoint(d, dir / "a.ckpt");
  save_checkpoint(d, dir / "b.ckpt");
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, EveryPayloadByteFlipIsDetected) {
  const auto dir = scratch("ckpt_flip");
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  const std::string good = read_bytes(dir / "a.ckpt");
  for (std::size_t i = 0; i < good.size(); ++i) {
    std::string bad = good;
    bad[i] = static_cast<char>(bad[i] ^ 0x10);
    write_file(dir / "bad.ckpt", bad);
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), IntegrityError) << "byte " << i;
  }
}

TEST(Checkpoint, TruncationReportsOffset) {
  const auto dir = scratch("ckpt_trunc");
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  const std::string good = read_bytes(dir / "a.ckpt");
  for (std::size_t keep : {std::size_t{0}, std::size_t{6}, good.size() / 2, good.size() - 1}) {
    write_file(dir / "cut.ckpt", good.substr(0, keep));
    const auto msg = error_message([&] { load_checkpoint(dir / "cut.ckpt"); });
    EXPECT_NE(msg.find("byte offset"), std::string::npos) << keep << ": " << msg;
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), IntegrityError);
  }
}

TEST(Checkpoint, NewerVersionRejected) {
  const auto dir = scratch("ckpt_version");
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  std::string bytes = read_bytes(dir / "a.ckpt");
  const std::uint32_t next = kCheckpointVersion + 1;
  std::memcpy(bytes.data() + 4, &next, 4);
  write_file(dir / "v2.ckpt", bytes);
  const auto msg = error_message([&] { load_checkpoint(dir / "v2.ckpt"); });
  EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
  EXPECT_THROW(load_checkpoint(dir / "v2.ckpt"), IntegrityError);
}

TEST(Checkpoint, DigestIsStableAndSensitive) {
  EXPECT_EQ(config_digest("abc"), config_digest("abc"));
  EXPECT_NE(config_digest("abc"), config_digest("abd"));
  EXPECT_EQ(config_digest("").size(), 16u);
  EXPECT_EQ(config_digest(""), "cbf29ce484222325");
}

}  // namespace
}  // namespace strada
