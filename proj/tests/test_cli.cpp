#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "nlohmann/json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  std::string cmd = std::string(CPSOLVER_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  CliResult r;
  if (!pipe) return r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), pipe)) > 0;) r.out.append(buf.data(), n);
  int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cpsolver_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string at(const std::string& sub) const { return (dir_ / sub).string(); }

  fs::path dir_;
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli("solve --method FOO").code, 2);
  EXPECT_EQ(cli("--out " + at("") + " solve --map /nonexistent.map").code, 2);
  EXPECT_TRUE(fs::exists(dir_ / "error.json"));
  auto err = nlohmann::json::parse(slurp(dir_ / "error.json"));
  EXPECT_EQ(err["error"]["kind"], "config");

  std::ofstream(dir_ / "bad.json") << "{oops";
  EXPECT_EQ(cli("--config " + at("bad.json") + " bench").code, 2);
  std::ofstream(dir_ / "crowded.json") << R"({"n_controlled": 1000})";
  EXPECT_EQ(cli("--config " + at("crowded.json") + " solve --method IGNORE --H 5").code, 1);
  EXPECT_EQ(cli("solve --method PRED --n-controlled 2 --m-uncontrolled 1 --predictor /nonexistent/bin").code,
            1);
}

TEST_F(Cli, CalibrateReportsRankForFullCalibrationSplit) {
  ASSERT_EQ(cli("--out " + at("data") +
                " gen-data --count 600 --steps 40 --train 2 --val 0 --test 200 --cal 398 --agents 2")
                .code,
            0);
  CliResult r = cli("--out " + at("cal") + " calibrate --dataset " + at("data") + " --H 5 --delta 0.05");
  ASSERT_EQ(r.code, 0);
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["cal2_size"], 199);
  EXPECT_EQ(j["p"], 190);
  EXPECT_EQ(j["test_size"], 200);
  EXPECT_EQ(j["C"].size(), 5u);
  EXPECT_TRUE(fs::exists(dir_ / "cal" / "calibration.json"));
}

TEST_F(Cli, LifelongIsDeterministicWithoutTiming) {
  const std::string flags =
      " --no-timing --seed 4 lifelong --method CP --n-controlled 4 --m-uncontrolled 2 --H 5 --w-hat 5 --T-hat 20";
  ASSERT_EQ(cli("--out " + at("a") + flags).code, 0);
  ASSERT_EQ(cli("--out " + at("b") + flags).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.json"), slurp(dir_ / "b" / "metrics.json"));
  EXPECT_EQ(slurp(dir_ / "a" / "events.jsonl"), slurp(dir_ / "b" / "events.jsonl"));
  EXPECT_FALSE(slurp(dir_ / "a" / "events.jsonl").empty());
}

TEST_F(Cli, ConfigFileAndFlagPrecedence) {
  std::ofstream(dir_ / "cfg.json") << R"({"n_controlled": 3, "m_uncontrolled": 1, "H": 5, "w_hat": 5, "T_hat": 10})";
  ASSERT_EQ(cli("--config " + at("cfg.json") + " --out " + at("o") +
                " --no-timing lifelong --method IGNORE --n-controlled 2")
                .code,
            0);
  std::string events = slurp(dir_ / "o" / "events.jsonl");
  auto first = nlohmann::json::parse(events.substr(0, events.find('\n')));
  EXPECT_EQ(first["controlled"].size(), 2u);
  EXPECT_EQ(first["uncontrolled"].size(), 1u);
}

TEST_F(Cli, BenchDefaultsToAllKindsAndThreeSeeds) {
  ASSERT_EQ(cli("--out " + at("bench") +
                " --no-timing bench --n-controlled 3 --m-uncontrolled 1 --H 5 --w-hat 5 --T-hat 10")
                .code,
            0);
  std::istringstream csv(slurp(dir_ / "bench" / "results.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 12);
  EXPECT_TRUE(fs::exists(dir_ / "bench" / "summary.csv"));
}

}  // namespace
