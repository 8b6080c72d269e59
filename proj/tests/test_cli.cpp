#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "test_support.hpp"
#include "ucil/trainer.hpp"

using namespace ucil;
using testing_support::slurp;
using testing_support::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> synth_args(const TempDir& dir, int tasks = 2) {
  return {"synth",   "--tasks", std::to_string(tasks), "--classes", "3",    "--dim", "16",     "--train",
          "40",      "--test",  "10",                  "--spread",  "0.03", "--seed", "7",     "--out",
          (dir / "data").string()};
}

std::vector<std::string> train_args(const TempDir& dir, const std::string& run = "run") {
  return {"train",      "--manifest", (dir / "data" / "manifest.json").string(), "--out", (dir / run).string(),
          "--profile",  "desk",       "--pnum", "9", "--epochs", "3", "--batch", "32", "--set", "hidden_dim=16",
          "--set",      "proj_dim=8", "--quiet"};
}

std::vector<std::string> with(std::vector<std::string> a, std::initializer_list<std::string> extra) {
  a.insert(a.end(), extra);
  return a;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { unsetenv("UCIL_OUT_DIR"); }
};

}  // namespace

TEST_F(Cli, SynthWritesManifestAndFiles) {
  TempDir dir;
  const auto r = invoke(synth_args(dir, 5));
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.out, (dir / "data" / "manifest.json").string() + "\n");
  int files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "data"))
    if (e.path().extension() == ".ucfv") ++files;
  EXPECT_EQ(files, 10);
  const std::string before = slurp(dir / "data" / "task3_train.ucfv");
  ASSERT_EQ(invoke(synth_args(dir, 5)).code, 0);
  EXPECT_EQ(slurp(dir / "data" / "task3_train.ucfv"), before);
}

TEST_F(Cli, SynthWithoutOutIsUsageError) {
  const auto r = invoke({"synth", "--tasks", "1"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, OutDirectoryFromEnvironment) {
  TempDir dir;
  setenv("UCIL_OUT_DIR", (dir / "env").string().c_str(), 1);
  const auto r = invoke({"synth", "--tasks", "1", "--classes", "2", "--dim", "8", "--train", "5", "--test", "2"});
  unsetenv("UCIL_OUT_DIR");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "env" / "manifest.json"));
}

TEST_F(Cli, InvalidSynthSpecIsUsageError) {
  TempDir dir;
  auto args = synth_args(dir);
  args[2] = "0";
  EXPECT_EQ(invoke(args).code, cli::kExitUsage);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"train", "--manifest", "x.json"}).code, cli::kExitUsage);
  const auto help = invoke({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("train"), std::string::npos);
  EXPECT_EQ(invoke({"--version"}).code, 0);
}

TEST_F(Cli, TrainWritesRunArtifactsAndEvalAgrees) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  const auto t = invoke(train_args(dir));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(t.out.rfind("acc_overall=", 0), 0u) << t.out;
  EXPECT_NE(t.out.find("pnum=9"), std::string::npos);
  for (const char* f : {"config.json", "metrics.jsonl", "results.jsonl", "checkpoint.ucck", "summary.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / f)) << f;

  const auto config = TrainConfig::from_json(slurp(dir / "run" / "config.json"));
  EXPECT_EQ(config.prototypes, 9);
  EXPECT_EQ(config.hidden_dim, 16);
  EXPECT_EQ(config.lambda_old, 10.0);
  EXPECT_EQ(lines(slurp(dir / "run" / "metrics.jsonl")).size(), 6u);
  const auto results = lines(slurp(dir / "run" / "results.jsonl"));
  ASSERT_EQ(results.size(), 2u);

  const auto e = invoke({"eval", "--checkpoint", (dir / "run" / "checkpoint.ucck").string(), "--manifest",
                      (dir / "data" / "manifest.json").string(), "--json"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out, results.back() + "\n");
}

TEST_F(Cli, EvalReportsBothForgettingVariants) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  ASSERT_EQ(invoke(train_args(dir)).code, 0);
  const std::vector<std::string> base{"eval", "--checkpoint", (dir / "run" / "checkpoint.ucck").string(),
                                      "--manifest", (dir / "data" / "manifest.json").string()};
  const auto global = invoke(base);
  const auto restricted = invoke(with(base, {"--mapping", "restricted"}));
  ASSERT_EQ(global.code, 0);
  ASSERT_EQ(restricted.code, 0);
  for (const auto* r : {&global, &restricted}) {
    EXPECT_NE(r->out.find("acc_overall="), std::string::npos);
    EXPECT_NE(r->out.find("acc_task_2="), std::string::npos);
    EXPECT_NE(r->out.find("forgetting_global="), std::string::npos);
    EXPECT_NE(r->out.find("forgetting_restricted="), std::string::npos);
  }
  EXPECT_NE(global.out.find("mapping=global"), std::string::npos);
  EXPECT_NE(restricted.out.find("mapping=restricted"), std::string::npos);
  EXPECT_EQ(invoke(with(base, {"--mapping", "sideways"})).code, cli::kExitUsage);
}

TEST_F(Cli, EvalMissingTestFileNamesIt) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  ASSERT_EQ(invoke(train_args(dir)).code, 0);
  std::filesystem::remove(dir / "data" / "task1_test.ucfv");
  const auto r = invoke({"eval", "--checkpoint", (dir / "run" / "checkpoint.ucck").string(), "--manifest",
                      (dir / "data" / "manifest.json").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("task1_test.ucfv"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalDimensionMismatchIsUsageError) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  ASSERT_EQ(invoke(train_args(dir)).code, 0);
  ASSERT_EQ(invoke({"synth", "--tasks", "1", "--classes", "2", "--dim", "8", "--train", "5", "--test", "3", "--out",
                 (dir / "other").string()})
                .code,
            0);
  const auto r = invoke({"eval", "--checkpoint", (dir / "run" / "checkpoint.ucck").string(), "--manifest",
                      (dir / "other" / "manifest.json").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(Cli, NoSepLossFlagZeroesMetric) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  ASSERT_EQ(invoke(with(train_args(dir), {"--no-sep-loss"})).code, 0);
  for (const auto& line : lines(slurp(dir / "run" / "metrics.jsonl")))
    EXPECT_EQ(epoch_record_from_json(line).loss.sep, 0.0) << line;
  EXPECT_FALSE(TrainConfig::from_json(slurp(dir / "run" / "config.json")).sep_loss);
}

TEST_F(Cli, AblationFlagsReachTheConfig) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  const auto r = invoke(with(train_args(dir), {"--fixed-sigma", "--no-projector", "--no-replay", "--frozen-old-centers",
                                            "--memory", "exemplar:5", "--variance", "scalar", "--lambda-ga", "2"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto c = TrainConfig::from_json(slurp(dir / "run" / "config.json"));
  EXPECT_FALSE(c.trainable_sigma);
  EXPECT_FALSE(c.use_projector);
  EXPECT_FALSE(c.replay);
  EXPECT_TRUE(c.freeze_old_centers);
  EXPECT_EQ(c.memory.exemplars_per_class, 5);
  EXPECT_EQ(c.memory.variance, VarianceMode::Scalar);
  EXPECT_EQ(c.lambda_ga, 2.0);
}

TEST_F(Cli, DifferentPnumBothComplete) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  auto a = train_args(dir, "a");
  a[8] = "12";
  auto b = train_args(dir, "b");
  b[8] = "4";
  const auto ra = invoke(a), rb = invoke(b);
  ASSERT_EQ(ra.code, 0);
  ASSERT_EQ(rb.code, 0);
  EXPECT_NE(ra.out.find("pnum=12"), std::string::npos);
  EXPECT_NE(rb.out.find("pnum=4"), std::string::npos);
  EXPECT_NE(slurp(dir / "a" / "summary.json").find("\"pnum\": 12"), std::string::npos);
}

TEST_F(Cli, ConfigFileStrictness) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  testing_support::spit(dir / "bad.json", R"({"epochs": 2, "lamda_old": 3})");
  const auto bad = invoke(with(train_args(dir), {"--config", (dir / "bad.json").string()}));
  EXPECT_EQ(bad.code, cli::kExitUsage);
  EXPECT_NE(bad.err.find("lamda_old"), std::string::npos);
  testing_support::spit(dir / "good.json", R"({"lambda_old": 3})");
  ASSERT_EQ(invoke(with(train_args(dir), {"--config", (dir / "good.json").string()})).code, 0);
  EXPECT_EQ(TrainConfig::from_json(slurp(dir / "run" / "config.json")).lambda_old, 3.0);
  EXPECT_EQ(invoke(with(train_args(dir), {"--set", "bogus=1"})).code, cli::kExitUsage);
  EXPECT_EQ(invoke(with(train_args(dir), {"--set", "no_equals_sign"})).code, cli::kExitUsage);
}

TEST_F(Cli, TrainIsDeterministicAndResumeMatches) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir, 3)).code, 0);
  ASSERT_EQ(invoke(train_args(dir, "a")).code, 0);
  ASSERT_EQ(invoke(train_args(dir, "b")).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.ucck"), slurp(dir / "b" / "checkpoint.ucck"));
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));

  ASSERT_EQ(invoke(with(train_args(dir, "c"), {"--stop-after", "1"})).code, 0);
  EXPECT_EQ(lines(slurp(dir / "c" / "results.jsonl")).size(), 1u);
  const auto resumed = invoke({"train", "--manifest", (dir / "data" / "manifest.json").string(), "--out",
                            (dir / "c").string(), "--resume", (dir / "c" / "checkpoint.ucck").string(), "--quiet"});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.ucck"), slurp(dir / "c" / "checkpoint.ucck"));
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "c" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "results.jsonl"), slurp(dir / "c" / "results.jsonl"));
}

TEST_F(Cli, InspectMemoryListsEveryClass) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  ASSERT_EQ(invoke(train_args(dir)).code, 0);
  const auto r = invoke({"inspect-memory", "--checkpoint", (dir / "run" / "checkpoint.ucck").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("classes=6"), std::string::npos);
  EXPECT_NE(r.out.find("total_floats="), std::string::npos);
  EXPECT_NE(r.out.find("exemplar_equivalents_per_class="), std::string::npos);
  EXPECT_NE(r.out.find("purity_histogram"), std::string::npos);

  const auto state = load_checkpoint(dir / "run" / "checkpoint.ucck");
  std::set<int> tasks;
  for (const auto& s : state.memory.stats()) {
    tasks.insert(s.task_id);
    EXPECT_GE(s.purity, 0.0);
    EXPECT_LE(s.purity, 1.0);
  }
  EXPECT_EQ(tasks, (std::set<int>{0, 1}));
  const double expected = static_cast<double>(state.memory.stored_floats()) / 16.0 / 6.0;
  std::ostringstream fig;
  fig << std::fixed << std::setprecision(4) << expected;
  EXPECT_NE(r.out.find("exemplar_equivalents_per_class=" + fig.str()), std::string::npos);
}

TEST_F(Cli, InspectCorruptCheckpointIsUsageError) {
  TempDir dir;
  testing_support::spit(dir / "bad.ucck", "UCCKgarbage");
  EXPECT_EQ(invoke({"inspect-memory", "--checkpoint", (dir / "bad.ucck").string()}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"inspect-memory", "--checkpoint", (dir / "none.ucck").string()}).code, cli::kExitUsage);
}

TEST_F(Cli, GradCheckPassesAndReports) {
  const auto r = invoke({"grad-check", "--instances", "5"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("centers"), std::string::npos);
  EXPECT_EQ(invoke({"grad-check", "--instances", "3", "--tolerance", "1e-30"}).code, cli::kExitNumerical);
}

TEST_F(Cli, NonFiniteTrainingAbortsWithExitThree) {
  TempDir dir;
  ASSERT_EQ(invoke(synth_args(dir)).code, 0);
  // A huge step size drives the scales to their clamp and the logits past
  // double range within the first few batches.
  const auto r = invoke(with(train_args(dir), {"--lr", "1e300"}));
  ASSERT_EQ(r.code, cli::kExitNumerical) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "diagnostics.txt"));
  EXPECT_NE(r.err.find("diagnostics"), std::string::npos);
}
