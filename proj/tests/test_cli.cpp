#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "strada/config.hpp"
#include "strada/datahub.hpp"
#include "strada/infer.hpp"
#include "strada/textio.hpp"

namespace strada {
namespace {

namespace fs = std::filesystem;

const char* kTinyConfig = R"({
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "head_dim": 8, "ffn_dim": 32, "context_length": 8},
  "features": {"lags": [1, 2, 3, 6], "hops": 1, "max_neighbors": 3, "k_pe": 2},
  "train": {"epochs": 2, "batches_per_epoch": 4, "batch_size": 8, "eval_windows": 64}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("strada_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.json") << kTinyConfig;
    ::unsetenv("STRADA_SEED");
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path at(const std::string& name) const { return dir / name; }

  // Runs the CLI from the scratch directory; stdout and stderr land in out.txt / err.txt.
  int run(const std::string& args, const std::string& env = "") const {
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" + STRADA_CLI + "' " + args +
                            " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string err() const { return slurp(at("err.txt")); }
  std::string out() const { return slurp(at("out.txt")); }

  void gen(const std::string& name, int seed, const std::string& extra = "") const {
    ASSERT_EQ(run("gen-synth --seed " + std::to_string(seed) + " --nodes 5 --steps 700 --out " + name + " " + extra), 0)
        << err();
  }

  void pipeline(const std::string& tag, const std::string& jobs) const {
    ASSERT_EQ(run("pretrain --config cfg.json --data src --out " + tag + ".ckpt --jobs " + jobs), 0) << err();
    ASSERT_EQ(run("adapt --config cfg.json --ckpt " + tag + ".ckpt --data tgt --method lora --rank 2 --fraction 0.55"
                  " --out " + tag + "_a.ckpt --jobs " + jobs),
              0)
        << err();
    ASSERT_EQ(run("eval --ckpt " + tag + "_a.ckpt --data tgt --samples 20 --max-origins 4 --out " + tag +
                  ".json --jobs " + jobs),
              0)
        << err();
  }
};

TEST_F(Cli, HelpListsEveryFlagWithDefault) {
  ASSERT_EQ(run("eval --help"), 0);
  const std::string help = out();
  for (const char* flag : {"--config", "--jobs", "--ckpt", "--data", "--split", "--horizons", "--samples",
                           "--max-origins", "--seed", "--out"}) {
    EXPECT_NE(help.find(flag), std::string::npos) << flag;
  }
  EXPECT_NE(help.find("[100]"), std::string::npos);
  EXPECT_NE(help.find("[test]"), std::string::npos);
  ASSERT_EQ(run("adapt --help"), 0);
  EXPECT_NE(out().find("--k-layers UINT [1]"), std::string::npos);
  ASSERT_EQ(run("gen-synth --help"), 0);
  EXPECT_NE(out().find("--beta FLOAT [0.2]"), std::string::npos);
}

TEST_F(Cli, ExitCodesAndOneLineDiagnostics) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("forecast --ckpt x"), 1);
  EXPECT_EQ(run("eval --ckpt x --data y --out z --bogus"), 1);
  EXPECT_EQ(run("eval --ckpt missing.ckpt --data nowhere --out r.json"), 2);
  std::size_t error_lines = 0;
  std::istringstream lines(err());
  for (std::string l; std::getline(lines, l);) error_lines += l.rfind("error: ", 0) == 0;
  EXPECT_EQ(error_lines, 1u);

  std::ofstream(at("bad.json")) << R"({"train": {"learning_rat": 1}})";
  EXPECT_EQ(run("pretrain --config bad.json --data src --out m.ckpt"), 1);
  EXPECT_NE(err().find("train.learning_rat"), std::string::npos);

  gen("src", 1);
  std::ofstream(at("diverge.json")) << R"({
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "head_dim": 8, "ffn_dim": 32, "context_length": 8},
    "features": {"lags": [1, 2, 3, 6], "hops": 1, "max_neighbors": 3, "k_pe": 2},
    "train": {"epochs": 3, "batches_per_epoch": 4, "batch_size": 8, "learning_rate": 1e12, "clip_norm": 0}})";
  EXPECT_EQ(run("pretrain --config diverge.json --data src --out m.ckpt"), 3);
  EXPECT_NE(err().find("non-finite"), std::string::npos);

  fs::create_directories(at("broken"));
  fs::copy_file(at("src/series.csv"), at("broken/series.csv"));
  std::ofstream(at("broken/edges.csv")) << "source,target,weight\n0,99,1\n";
  std::ofstream(at("cfg0.json")) << R"({"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "head_dim": 8,
      "ffn_dim": 32, "context_length": 8}, "features": {"lags": [1, 2, 3, 6], "hops": 1, "max_neighbors": 3,
      "k_pe": 2}, "train": {"epochs": 0}})";
  EXPECT_EQ(run("pretrain --config cfg0.json --data broken --out m.ckpt"), 2);
}

TEST_F(Cli, ZeroEpochCheckpointEvaluatesAgainstPersistence) {
  gen("src", 2);
  std::ofstream(at("cfg0.json")) << R"({"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "head_dim": 8,
      "ffn_dim": 32, "context_length": 8}, "features": {"lags": [1, 2, 3, 6], "hops": 1, "max_neighbors": 3,
      "k_pe": 2}, "train": {"epochs": 0}})";
  ASSERT_EQ(run("pretrain --config cfg0.json --data src --out z.ckpt"), 0) << err();
  ASSERT_EQ(run("eval --ckpt z.ckpt --data src --samples 5 --max-origins 3 --out r.json"), 0) << err();
  const auto j = nlohmann::json::parse(slurp(at("r.json")));
  ASSERT_EQ(j["horizons"].size(), 3u);
  for (const auto& h : j["horizons"]) {
    EXPECT_GT(h["model"]["count"].get<std::size_t>(), 0u);
    EXPECT_GT(h["persistence"]["count"].get<std::size_t>(), 0u);
    EXPECT_TRUE(std::isfinite(h["model"]["mae"].get<double>()));
  }
}

TEST_F(Cli, PretrainLogStartsWithResolvedConfig) {
  gen("src", 3);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m.ckpt"), 0) << err();
  std::ifstream log(at("m.ckpt.log.jsonl"));
  std::string first;
  std::getline(log, first);
  const auto head = nlohmann::json::parse(first);
  ASSERT_TRUE(head.contains("config"));
  EXPECT_EQ(head["config"]["model"]["d_model"], 16);
  EXPECT_EQ(head["config"]["train"]["learning_rate"], 0.001);
  EXPECT_NE(err().find("config {"), std::string::npos);
}

TEST_F(Cli, SingleSampleForecastMedianIsTheTrajectory) {
  gen("src", 4);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m.ckpt"), 0) << err();
  const DatasetBundle d = load_dataset_dir(at("src"));
  const std::size_t origin = 650;
  const std::string stamp = format_timestamp(d.time_at(origin));
  ASSERT_EQ(run("forecast --ckpt m.ckpt --data src --origin " + stamp +
                " --horizon 4 --samples 1 --seed 9 --quantiles 0.1,0.9 --out f.csv"),
            0)
      << err();

  const SavedModel m = load_model(at("m.ckpt"));
  RolloutConfig rc;
  rc.horizon = 4;
  rc.n_samples = 1;
  rc.seed = 9;
  const auto ts = d.extended_timestamps(0);
  const ForecastFan fan =
      rollout(m.params, m.features, prepare_graph(d.graph, m.features), d.series.slice_steps(0, origin), ts, rc);

  std::ifstream in(at("f.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "node,step,time,median,q0.1,q0.9");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const auto cells = text::split(line, ',');
    ASSERT_EQ(cells.size(), 6u);
    std::size_t n = 0, h = 0;
    ASSERT_TRUE(text::parse_size(cells[0], n) && text::parse_size(cells[1], h));
    double med = 0, lo = 0, hi = 0;
    ASSERT_TRUE(text::parse_double(cells[3], med) && text::parse_double(cells[4], lo) &&
                text::parse_double(cells[5], hi));
    EXPECT_EQ(med, fan.at(n, h - 1, 0));
    EXPECT_EQ(lo, med);
    EXPECT_EQ(hi, med);
    EXPECT_EQ(std::string(cells[2]), format_timestamp(d.time_at(origin + h - 1)));
    ++rows;
  }
  EXPECT_EQ(rows, d.nodes() * 4);
}

TEST_F(Cli, ForecastPastTheSeriesEndUsesExtendedCalendar) {
  gen("src", 5);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m.ckpt"), 0) << err();
  const DatasetBundle d = load_dataset_dir(at("src"));
  const std::string stamp = format_timestamp(d.time_at(d.steps()));
  ASSERT_EQ(run("forecast --ckpt m.ckpt --data src --origin " + stamp + " --horizon 3 --samples 8 --out f.csv"), 0)
      << err();
  EXPECT_EQ(run("forecast --ckpt m.ckpt --data src --origin 1999-01-01T00:00:00Z --horizon 3 --out g.csv"), 2);
  EXPECT_EQ(run("forecast --ckpt m.ckpt --data src --origin " + format_timestamp(d.time_at(d.steps() + 1)) +
                " --horizon 3 --out g.csv"),
            2);
}

TEST_F(Cli, PipelineIsByteIdenticalAcrossRunsAndJobs) {
  gen("src", 7);
  gen("tgt", 13, "--amplitude 2");
  pipeline("a", "1");
  pipeline("b", "1");
  pipeline("c", "4");
  const std::string a = slurp(at("a.json"));
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(at("b.json")));
  EXPECT_EQ(a, slurp(at("c.json")));
  EXPECT_EQ(slurp(at("a_a.ckpt")), slurp(at("c_a.ckpt")));
}

TEST_F(Cli, SeedEnvironmentOverridesConfig) {
  gen("src", 8);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m1.ckpt", "STRADA_SEED=1"), 0) << err();
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m2.ckpt", "STRADA_SEED=2"), 0) << err();
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m3.ckpt", "STRADA_SEED=1"), 0) << err();
  EXPECT_NE(slurp(at("m1.ckpt")), slurp(at("m2.ckpt")));
  EXPECT_EQ(slurp(at("m1.ckpt")), slurp(at("m3.ckpt")));
  EXPECT_EQ(load_model(at("m2.ckpt")).train.seed, 2u);
  EXPECT_EQ(run("pretrain --config cfg.json --data src --out m4.ckpt", "STRADA_SEED=abc"), 1);
}

TEST_F(Cli, PerturbAndEmbeddingOutputs) {
  gen("src", 9);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m.ckpt"), 0) << err();
  ASSERT_EQ(run("perturb --ckpt m.ckpt --data src --samples 4 --max-origins 2 --sigmas 0.2,1 --out p.csv"), 0)
      << err();
  std::ifstream p(at("p.csv"));
  std::string line;
  std::getline(p, line);
  EXPECT_EQ(line, "sigma,horizon,mae,rmse,mape,persistence_mae");
  std::size_t rows = 0;
  while (std::getline(p, line)) ++rows;
  EXPECT_EQ(rows, 2u * 3u);
  EXPECT_EQ(run("perturb --ckpt m.ckpt --data src --sigmas 1,0.2 --out p.csv"), 1);

  ASSERT_EQ(run("export-embeddings --ckpt m.ckpt --data src --limit 7 --out e.csv"), 0) << err();
  std::ifstream e(at("e.csv"));
  std::getline(e, line);
  EXPECT_EQ(text::split(line, ',').size(), 3u + 16u);
  rows = 0;
  while (std::getline(e, line)) ++rows;
  EXPECT_EQ(rows, 7u);
}

TEST_F(Cli, MergeFoldsAdapters) {
  gen("src", 10);
  gen("tgt", 11);
  ASSERT_EQ(run("pretrain --config cfg.json --data src --out m.ckpt"), 0) << err();
  ASSERT_EQ(run("adapt --ckpt m.ckpt --data tgt --method lora --rank 2 --out a.ckpt"), 0) << err();
  ASSERT_EQ(run("merge --ckpt a.ckpt --out merged.ckpt"), 0) << err();
  EXPECT_TRUE(load_model(at("a.ckpt")).params.has_lora());
  EXPECT_FALSE(load_model(at("merged.ckpt")).params.has_lora());
  EXPECT_EQ(run("merge --ckpt merged.ckpt --out twice.ckpt"), 1);
  EXPECT_EQ(run("adapt --ckpt m.ckpt --data tgt --method topk --k-layers 5 --out t.ckpt"), 1);
}

}  // namespace
}  // namespace strada
