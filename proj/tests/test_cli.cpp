#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "robustclf/cli.hpp"
#include "robustclf/feature_bank.hpp"
#include "robustclf/net.hpp"
#include "robustclf/train_config.hpp"
#include "test_util.hpp"

namespace robustclf {
namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "robustclf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

TEST(Cli, HelpOnEverySubcommandExitsZero) {
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  for (const char* sub : {"gen-synth", "inspect-bank", "train", "eval", "ablate", "sweep", "landscape"}) {
    EXPECT_EQ(run({sub, "--help"}).code, kExitOk) << sub;
  }
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, kExitUsage);
  const CliResult r = run({"frobnicate"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(run({"gen-synth", "--bogus-flag", "1", "--out", "x.fb"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--bank", "x.fb"}).code, kExitUsage);
}

TEST(Cli, RuntimeFailuresExitTwo) {
  TempDir dir;
  const CliResult r = run({"inspect-bank", (dir.path() / "missing.fb").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_NE(r.err.find("missing.fb"), std::string::npos);
}

TEST(Cli, GenSynthThenInspect) {
  TempDir dir;
  const auto bank = (dir.path() / "bank.fb").string();
  ASSERT_EQ(run({"gen-synth", "--n-pos", "500", "--n-neg", "500", "--dim", "16", "--sep", "6", "--seed", "42",
                 "--out", bank})
                .code,
            kExitOk);
  EXPECT_EQ(load_bank(bank, BankFormat::kBinary), generate_synthetic(500, 500, 16, 6.0, 42));
  const CliResult r = run({"inspect-bank", bank});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("n=1000 n_pos=500 n_neg=500 dim=16"), std::string::npos);

  const auto csv = (dir.path() / "bank.csv").string();
  ASSERT_EQ(run({"gen-synth", "--n-pos", "3", "--n-neg", "4", "--dim", "2", "--out", csv}).code, kExitOk);
  EXPECT_EQ(slurp(csv).rfind("label,f0,f1\n", 0), 0u);
}

TEST(Cli, TrainEvalPipelineAndReproducibility) {
  TempDir dir;
  const auto train_bank = (dir.path() / "train.fb").string();
  const auto test_bank = (dir.path() / "test.fb").string();
  run({"gen-synth", "--n-pos", "60", "--n-neg", "60", "--dim", "4", "--sep", "6", "--seed", "1", "--out", train_bank});
  run({"gen-synth", "--n-pos", "30", "--n-neg", "30", "--dim", "4", "--sep", "6", "--seed", "2", "--out", test_bank});
  {
    std::ofstream cfg(dir.path() / "base.cfg");
    cfg << "hidden=16\nepochs=3\n";
  }
  const auto run1 = dir.path() / "run1";
  const CliResult t = run({"train", "--bank", train_bank, "--config", (dir.path() / "base.cfg").string(), "--set",
                           "gamma=0.4", "--seed", "9", "--out", run1.string()});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  EXPECT_NE(t.out.find("epoch 3/3"), std::string::npos);
  for (const char* f : {"config.cfg", "model.ckpt", "run_record.txt"}) EXPECT_TRUE(std::filesystem::exists(run1 / f));
  const TrainConfig effective = load_config(run1 / "config.cfg");
  EXPECT_EQ(effective.hidden, 16u);
  EXPECT_EQ(effective.gamma, 0.4);
  EXPECT_EQ(effective.seed, 9u);
  EXPECT_NE(slurp(run1 / "run_record.txt").find("config.gamma=0.4"), std::string::npos);

  // Re-running with the effective config reproduces the checkpoint bit for bit.
  const auto run2 = dir.path() / "run2";
  ASSERT_EQ(run({"train", "--bank", train_bank, "--config", (run1 / "config.cfg").string(), "--out", run2.string()}).code,
            kExitOk);
  EXPECT_EQ(slurp(run1 / "model.ckpt"), slurp(run2 / "model.ckpt"));

  const CliResult e = run({"eval", "--bank", test_bank, "--model", (run1 / "model.ckpt").string(), "--out",
                           (dir.path() / "eval").string()});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  EXPECT_NE(e.out.find("AUC: "), std::string::npos);
  EXPECT_NE(e.out.find("%)"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "eval" / "roc.csv"));
  EXPECT_NE(slurp(dir.path() / "eval" / "eval_report.txt").find("auc="), std::string::npos);
}

TEST(Cli, SeedPrecedence) {
  TempDir dir;
  const auto bank = (dir.path() / "b.fb").string();
  run({"gen-synth", "--n-pos", "10", "--n-neg", "10", "--dim", "2", "--out", bank});
  {
    std::ofstream cfg(dir.path() / "c.cfg");
    cfg << "hidden=4\nepochs=1\nseed=5\n";
  }
  ::setenv("ROBUST_CLF_SEED", "77", 1);
  run({"train", "--bank", bank, "--out", (dir.path() / "env").string(), "--set", "hidden=4", "--epochs", "1"});
  run({"train", "--bank", bank, "--out", (dir.path() / "file").string(), "--config", (dir.path() / "c.cfg").string()});
  run({"train", "--bank", bank, "--out", (dir.path() / "flag").string(), "--config", (dir.path() / "c.cfg").string(),
       "--seed", "3"});
  ::unsetenv("ROBUST_CLF_SEED");
  EXPECT_EQ(load_config(dir.path() / "env" / "config.cfg").seed, 77u);
  EXPECT_EQ(load_config(dir.path() / "file" / "config.cfg").seed, 5u);
  EXPECT_EQ(load_config(dir.path() / "flag" / "config.cfg").seed, 3u);
}

TEST(Cli, InvalidConfigIsAUsageError) {
  TempDir dir;
  const auto bank = (dir.path() / "b.fb").string();
  run({"gen-synth", "--n-pos", "10", "--n-neg", "10", "--dim", "2", "--out", bank});
  EXPECT_EQ(run({"train", "--bank", bank, "--out", (dir.path() / "r").string(), "--set", "alpha=2"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--bank", bank, "--out", (dir.path() / "r").string(), "--set", "nokey"}).code, kExitUsage);
}

TEST(Cli, AblateSweepAndLandscapeWriteTheirTables) {
  TempDir dir;
  const auto bank = (dir.path() / "b.fb").string();
  run({"gen-synth", "--n-pos", "40", "--n-neg", "40", "--dim", "3", "--sep", "4", "--out", bank});
  const std::vector<std::string> quick{"--set", "hidden=8", "--epochs", "1"};
  auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), quick.begin(), quick.end());
    return run(args);
  };

  const auto abl = dir.path() / "abl";
  ASSERT_EQ(with({"ablate", "--bank", bank, "--out", abl.string(), "--jobs", "2"}).code, kExitOk);
  EXPECT_EQ(count_lines(abl / "ablation.csv"), 6u);

  const auto sw = dir.path() / "sweep";
  const CliResult s = with({"sweep", "--bank", bank, "--parameter", "alpha", "--values", "0.1:0.9:0.1", "--out", sw.string()});
  ASSERT_EQ(s.code, kExitOk) << s.err;
  EXPECT_EQ(count_lines(sw / "sweep_alpha.csv"), 10u);

  const auto proto = dir.path() / "proto";
  ASSERT_EQ(with({"sweep", "--bank", bank, "--parameter", "protocol", "--values", "0.2,0.8", "--gamma-values", "0.3,0.7",
                  "--out", proto.string()})
                .code,
            kExitOk);
  EXPECT_EQ(count_lines(proto / "sweep_alpha.csv"), 3u);
  EXPECT_EQ(count_lines(proto / "sweep_gamma.csv"), 3u);

  const auto tr = dir.path() / "tr";
  ASSERT_EQ(with({"train", "--bank", bank, "--out", tr.string()}).code, kExitOk);
  const auto land = dir.path() / "land";
  ASSERT_EQ(with({"landscape", "--bank", bank, "--model", (tr / "model.ckpt").string(), "--grid", "5", "--out",
                  land.string()})
                .code,
            kExitOk);
  EXPECT_EQ(count_lines(land / "landscape.csv"), 26u);
}

TEST(Cli, BinaryEntryPointExists) {
  EXPECT_TRUE(std::filesystem::exists(ROBUSTCLF_CLI_PATH));
  const int rc = std::system((std::string(ROBUSTCLF_CLI_PATH) + " --help > /dev/null 2>&1").c_str());
  EXPECT_EQ(rc, 0);
}

}  // namespace
}  // namespace robustclf
