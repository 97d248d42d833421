#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "emcomm/runner.hpp"

using namespace emcomm;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
world = combination
world.values = 6
world.k = 2
world.grid_h = 2
world.grid_w = 2
world.dim = 8
world.split_train = 2
world.split_eval = 1
architecture = lstm
vocab = 8
length = 2
hidden = 8
batch_size = 8
max_steps = 4
candidates = 4
eval_rounds = 60
log_interval = 2
)";

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("emcomm_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = parse_config(kTiny);
  c.output_dir = out.string();
  return c;
}

RunResult result(double gen, double ts, std::uint64_t seed) {
  RunResult r;
  r.gen_acc = gen;
  r.topsim = ts;
  r.seed = seed;
  return r;
}

}  // namespace

TEST(ConfigTest, ParsesKeysAndLists) {
  const ExperimentConfig c = parse_config(std::string(kTiny) + "alpha = 0.001, 0.01\nseeds = 0..2, 7\n# note\n");
  EXPECT_EQ(c.world.values, 6u);
  EXPECT_EQ(c.train.architecture, Architecture::lstm);
  EXPECT_EQ(c.train.sizes.hidden, 8u);
  EXPECT_EQ(c.alphas, (std::vector<double>{0.001, 0.01}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0, 1, 2, 7}));
  EXPECT_EQ(setting_label(c), "at-at");
}

TEST(ConfigTest, ErrorsListEveryOffendingKey) {
  try {
    parse_config("vocab = 0\nbatch_size = -3\ncolour = blue\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("vocab"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch_size"), std::string::npos) << msg;
    EXPECT_NE(msg.find("colour"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("vocab = 4\nvocab = 5\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(parse_config("speaker_mode = sometimes\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/emcomm.conf"), ConfigError);
}

TEST(ConfigTest, HashIgnoresRunControlKeys) {
  const ExperimentConfig a = parse_config(kTiny);
  ExperimentConfig b = a;
  b.seeds = {3, 4, 5};
  b.alphas = {0.5};
  b.output_dir = "elsewhere";
  b.workers = 4;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  ExperimentConfig c = a;
  c.train.lr = 2e-4;
  EXPECT_NE(config_hash(a), config_hash(c));
  ExperimentConfig d = a;
  d.train.listener_mode = AttentionMode::noat;
  EXPECT_NE(config_hash(a), config_hash(d));
  EXPECT_EQ(parse_config(format_key_values(semantic_key_values(a))).train.lr, a.train.lr);
  EXPECT_EQ(config_hash(parse_config(format_key_values(semantic_key_values(a)))), config_hash(a));
}

TEST(SelectTest, TopKByGenAccThenTopSimThenSeed) {
  std::vector<RunResult> rs{result(0.5, 0.1, 0), result(0.7, 0.2, 1), result(0.7, 0.3, 2), result(0.2, 0.9, 3),
                            result(0.5, 0.1, 4)};
  const auto top = select_top_k(rs, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].seed, 2u);
  EXPECT_EQ(top[1].seed, 1u);
  EXPECT_EQ(top[2].seed, 0u);
  EXPECT_THROW(select_top_k(rs, 6), ContractError);
  EXPECT_EQ(select_top_k(rs, 0).size(), 0u);
}

TEST(SelectTest, SelectedDominateExcluded) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RunResult> rs;
    for (std::uint64_t s = 0; s < 20; ++s) rs.push_back(result(uniform_index(rng, 10) / 10.0, uniform01(rng), s));
    const std::size_t k = 1 + uniform_index(rng, 20);
    const auto top = select_top_k(rs, k);
    double min_sel = 1e9;
    for (const auto& r : top) min_sel = std::min(min_sel, r.gen_acc);
    std::vector<std::uint64_t> chosen;
    for (const auto& r : top) chosen.push_back(r.seed);
    for (const auto& r : rs) {
      if (std::find(chosen.begin(), chosen.end(), r.seed) == chosen.end()) EXPECT_LE(r.gen_acc, min_sel);
    }
  }
}

TEST(ReportTest, EmitsPlotsForFourSettings) {
  TempDir tmp("report");
  std::vector<RunResult> runs;
  const char* settings[] = {"at-at", "noat-noat", "at-noat", "noat-at"};
  for (int s = 0; s < 4; ++s) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      RunResult r = result(0.1 * s + 0.01 * static_cast<double>(seed), 0.2, seed);
      r.setting = settings[s];
      r.config_hash = std::string(16, static_cast<char>('a' + s));
      r.alpha = 0.01;
      r.dir = (tmp.path() / settings[s] / std::to_string(seed)).string();
      fs::create_directories(r.dir);
      write_text(fs::path(r.dir) / "discrepancy.csv", "episode,success,discrepancy\n0,1,0.1\n1,0,0.5\n");
      runs.push_back(r);
    }
  }
  const auto groups = group_runs(runs);
  ASSERT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups[0].label, "noat-noat");
  EXPECT_EQ(groups[3].label, "at-at");
  const ReportSummary rep = emit_plots(groups, 5, tmp.path() / "out");
  EXPECT_EQ(rep.warnings.size(), 4u);
  for (const char* f : {"train_acc.csv", "gen_acc.svg", "topsim.svg", "box_summary.csv", "discrepancy_hist.csv",
                        "discrepancy_at-at.svg", "warnings.txt"}) {
    EXPECT_TRUE(fs::exists(tmp.path() / "out" / f)) << f;
  }
  const std::string hist = read_text(tmp.path() / "out" / "discrepancy_hist.csv");
  EXPECT_NE(hist.find("at-at,success"), std::string::npos);
  EXPECT_NE(hist.find("at-at,failure"), std::string::npos);
}

TEST(MetricsFileTest, RoundTrip) {
  RunResult r = result(0.625, -0.25, 7);
  r.config_hash = "0123456789abcdef";
  r.setting = "noat-at";
  r.alpha = 0.001;
  r.train_acc = 0.75;
  r.discrepancy_success = 0.125;
  const RunResult back = parse_metrics(format_metrics(r));
  EXPECT_EQ(back.gen_acc, r.gen_acc);
  EXPECT_EQ(back.topsim, r.topsim);
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.alpha, 0.001);
  EXPECT_EQ(back.setting, "noat-at");
  EXPECT_EQ(back.discrepancy_success, 0.125);
  EXPECT_TRUE(std::isnan(back.discrepancy_failure));
  EXPECT_FALSE(back.failed);
}

TEST(ExperimentTest, SweepLayoutReuseAndReproducibility) {
  TempDir tmp("sweep");
  ExperimentConfig c = tiny(tmp.path());
  c.alphas = {0.0, 0.01, 0.1};
  c.seeds = {0, 1, 2, 3};
  c.workers = 2;
  std::ostringstream log;
  const auto first = run_experiment(c, &log);
  ASSERT_EQ(first.size(), 12u);
  const fs::path root = tmp.path() / config_hash(c);
  std::size_t dirs = 0;
  for (const char* a : {"0", "0.01", "0.1"}) {
    for (int s = 0; s < 4; ++s) {
      const fs::path d = root / a / std::to_string(s);
      for (const char* f : {"config", "log.csv", "speaker.ck", "listener.ck", "language.txt", "discrepancy.csv",
                            "association.csv", "metrics.csv"}) {
        EXPECT_TRUE(fs::exists(d / f)) << d / f;
      }
      ++dirs;
    }
  }
  EXPECT_EQ(dirs, 12u);
  EXPECT_EQ(collect_runs(tmp.path()).size(), 12u);

  const std::string metrics_before = read_text(root / "0.01" / "1" / "metrics.csv");
  std::ostringstream log2;
  const auto second = run_experiment(c, &log2);
  EXPECT_EQ(log2.str().find("done"), std::string::npos);
  EXPECT_EQ(read_text(root / "0.01" / "1" / "metrics.csv"), metrics_before);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i].gen_acc, second[i].gen_acc);

  // a rerun from scratch writes identical bytes
  const std::string spk = read_text(root / "0.1" / "2" / "speaker.ck");
  fs::remove_all(root / "0.1" / "2");
  c.workers = 1;
  run_experiment(c, nullptr);
  EXPECT_EQ(read_text(root / "0.1" / "2" / "speaker.ck"), spk);
}

TEST(ExperimentTest, ReloadedRunReproducesMetrics) {
  TempDir tmp("reload");
  ExperimentConfig c = tiny(tmp.path());
  c.seeds = {5};
  const RunResult r = run_experiment(c, nullptr).front();
  const LoadedRun lr = load_run(r.dir);
  EXPECT_EQ(lr.seed, 5u);
  const double train_acc = evaluate(lr.agents, lr.world, Split::train, lr.config.eval_rounds, lr.config.train.candidates, 5);
  EXPECT_NEAR(train_acc, r.train_acc, 0.005);
  const AnalysisResult a = analyze_agents(lr.agents, lr.world, lr.config.eval_rounds, lr.config.train.candidates, 5,
                                          lr.config.discrepancy_on);
  EXPECT_EQ(format_discrepancy(a.discrepancy), read_text(fs::path(r.dir) / "discrepancy.csv"));
  EXPECT_EQ(a.discrepancy.size(), 2 * lr.config.eval_rounds);
}

TEST(ExperimentTest, CorruptCheckpointIsRejected) {
  TempDir tmp("corrupt");
  ExperimentConfig c = tiny(tmp.path());
  const RunResult r = run_experiment(c, nullptr).front();
  std::string bytes = read_text(fs::path(r.dir) / "listener.ck");
  write_text(fs::path(r.dir) / "listener.ck", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_run(r.dir), FormatError);
}

TEST(ExperimentTest, UntrainedAgentsScoreNearChance) {
  TempDir tmp("untrained");
  ExperimentConfig c = tiny(tmp.path());
  c.world = WorldSpec{};
  c.train.candidates = 15;
  c.train.max_steps = 0;
  c.eval_rounds = 2000;
  c.seeds = {0};
  const auto rs = run_experiment(c, nullptr);
  ASSERT_EQ(rs.size(), 1u);
  // a single random pair carries its own bias; pooled pairs are checked elsewhere
  EXPECT_NEAR(rs[0].gen_acc, 1.0 / 15, 0.06);
  EXPECT_NEAR(rs[0].train_acc, 1.0 / 15, 0.06);
}

TEST(ExperimentTest, MixedModesSkipDiscrepancy) {
  TempDir tmp("mixed");
  ExperimentConfig c = tiny(tmp.path());
  c.train.speaker_mode = AttentionMode::noat;
  const RunResult r = run_experiment(c, nullptr).front();
  EXPECT_TRUE(std::isnan(r.discrepancy_success));
  EXPECT_TRUE(std::isnan(r.discrepancy_failure));
  EXPECT_FALSE(fs::exists(fs::path(r.dir) / "association.csv"));
  EXPECT_EQ(r.setting, "noat-at");
}
