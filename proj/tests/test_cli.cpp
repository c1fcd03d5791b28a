#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <string>

#include "hitl/persistence.hpp"
#include "support/small_bench.hpp"
#include "support/temp_dir.hpp"

using namespace hitl;
using hitl::testing::TempDir;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(HITL_CLI_PATH) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_text(const fs::path& p) { return read_file_bytes(p); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    write_json_file(spec(), nlohmann::json(hitl::testing::small_bench_spec()));
    write_json_file(model(), nlohmann::json(hitl::testing::small_model_config()));
    nlohmann::json session = hitl::testing::small_session();
    session.erase("strategy");
    session.erase("seed");
    write_json_file(session_file(), session);
  }
  fs::path spec() const { return dir.path() / "spec.json"; }
  fs::path model() const { return dir.path() / "model.json"; }
  fs::path session_file() const { return dir.path() / "session.json"; }
  std::string common() const {
    return "--spec " + spec().string() + " --model " + model().string() + " --session " + session_file().string() +
           " --pretrain-epochs 2 --cache " + (dir.path() / "cache").string();
  }

  TempDir dir;
};

TEST_F(CliTest, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("autoloop --rounds minus-one").code, 1);
  EXPECT_EQ(run("autoloop --strategy psychic --rounds 0").code, 1);
  EXPECT_EQ(run("compare --seeds 3..1 --rounds 0").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, RuntimeFailuresExitWithTwo) {
  EXPECT_EQ(run("eval --checkpoint " + (dir.path() / "none.ckpt").string() + " --dataset " +
                (dir.path() / "none").string())
                .code,
            2);
}

TEST_F(CliTest, ZeroRoundsReportsOnlyThePretrainedRow) {
  const auto r = run("autoloop --rounds 0 --report - " + common());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind(std::string(kReportHeader) + "\n0,attention,", 0), 0u) << r.out;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 2);
}

TEST_F(CliTest, CompareWithOnePairMatchesAutoloop) {
  const auto a = run("autoloop --strategy random --seed 4 --rounds 2 --report - " + common());
  const auto c = run("compare --strategies random --seeds 4 --rounds 2 --report - " + common());
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(c.code, 0);
  EXPECT_EQ(a.out, c.out);
  EXPECT_EQ(std::count(a.out.begin(), a.out.end(), '\n'), 4);
}

TEST_F(CliTest, CompareSummaryHasPerSeedRowsAndMeans) {
  const fs::path summary = dir.path() / "summary.csv";
  ASSERT_EQ(run("compare --strategies random,entropy --seeds 4,5 --rounds 1 --report " +
                (dir.path() / "r.csv").string() + " --summary " + summary.string() + " " + common())
                .code,
            0);
  const std::string text = read_text(summary);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
  EXPECT_NE(text.find("\nrandom,mean,"), std::string::npos);
  EXPECT_NE(text.find("\nentropy,5,"), std::string::npos);
  const std::string report = read_text(dir.path() / "r.csv");
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 9);
}

TEST_F(CliTest, GeneratePretrainEval) {
  const fs::path data = dir.path() / "bench", ckpt = dir.path() / "pre.ckpt";
  ASSERT_EQ(run("generate --spec " + spec().string() + " --out " + data.string()).code, 0);
  EXPECT_TRUE(fs::exists(data / "train" / "manifest.json"));
  ASSERT_EQ(run("pretrain --dataset " + data.string() + " --model " + model().string() + " --epochs 2 --out " +
                ckpt.string())
                .code,
            0);
  const auto r = run("eval --checkpoint " + ckpt.string() + " --dataset " + data.string());
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  for (const char* split : {"val", "test_biased", "test_decorrelated"}) {
    ASSERT_TRUE(j.contains(split));
    EXPECT_GE(j[split]["accuracy"].get<double>(), 0.0);
  }
  EXPECT_TRUE(j["test_biased"].contains("attention_in_target"));
  EXPECT_EQ(run("pretrain --dataset " + data.string() + " --spec " + spec().string() + " --out x").code, 1);
}

}  // namespace
