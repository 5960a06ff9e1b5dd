#include "dyna/cli.hpp"
#include "dyna/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace dyna;

namespace {

struct Cli {
  int code = 0;
  std::string out;
  std::string err;
};

Cli run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Cli r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("dyna_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
    io::write_text(dir_ / "tiny.json", R"({
  "env": {"id": "four_rooms"},
  "model": {"kind": "perfect"},
  "real_frames": 300,
  "eval": {"episodes": 2},
  "agent": {"replay_capacity": 1000},
  "seeds": [0, 1]
})");
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::string config() const { return (dir_ / "tiny.json").string(); }
  std::string out() const { return (dir_ / "out").string(); }

  std::filesystem::path dir_;
};

}  // namespace

TEST_F(CliTest, ValidateReportsSweepSize) {
  const auto r = run({"validate", "--config", config()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("7 conditions x 2 seeds"), std::string::npos) << r.out;
  const auto one = run({"validate", "--config", config(), "--set", "planning.shape=\"2x5\""});
  EXPECT_EQ(one.code, 0);
  EXPECT_NE(one.out.find("perfect 2x5"), std::string::npos);
}

TEST_F(CliTest, BadConfigExitsTwoWithMessage) {
  auto r = run({"validate", "--config", config(), "--set", "planning.shape=\"3x3\""});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("invalid config"), std::string::npos);
  r = run({"validate", "--config", config(), "--set", "agent.bogus=1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("agent.bogus"), std::string::npos);
  r = run({"validate", "--config", config(), "--seed-range", "5:5"});
  EXPECT_EQ(r.code, 2);
  r = run({"validate", "--config", (dir_ / "absent.json").string()});
  EXPECT_EQ(r.code, 2);
  r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, RunWritesOutputsAndIsRepeatable) {
  const std::vector<std::string> args{"run", "--config", config(), "--set", "planning.shape=\"5x2\"",
                                      "--seed-range", "0:2", "--jobs", "2", "--out", out()};
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("over 2 seeds"), std::string::npos);
  const std::string first = io::read_text(dir_ / "out" / "results.csv");
  EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 3);
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(io::read_text(dir_ / "out" / "results.csv"), first);

  const auto single = run({"run", "--config", config(), "--set", "planning.shape=\"5x2\"", "--seed", "1", "--out", out()});
  ASSERT_EQ(single.code, 0);
  EXPECT_NE(single.out.find("over 1 seeds"), std::string::npos);
}

TEST_F(CliTest, SweepThenPlot) {
  const auto r = run({"sweep", "--config", config(), "--set", "sweep.shapes=[\"10x1\",\"1x10\"]", "--seed-range",
                      "0:1", "--out", out()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("base-10m"), std::string::npos);
  std::filesystem::remove(dir_ / "out" / "chart.svg");
  const auto p = run({"plot", "--out", out()});
  ASSERT_EQ(p.code, 0) << p.err;
  const std::string svg = io::read_text(dir_ / "out" / "chart.svg");
  EXPECT_NE(svg.find("perfect 1x10"), std::string::npos);
}

TEST_F(CliTest, PlotWithoutInputFails) {
  const auto r = run({"plot", "--out", out()});
  EXPECT_EQ(r.code, 2);
}

TEST(ShippedConfigs, AllValidate) {
  const std::filesystem::path dir = std::filesystem::path(DYNA_SOURCE_DIR) / "configs";
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    ++seen;
    const auto r = run({"validate", "--config", entry.path().string()});
    EXPECT_EQ(r.code, 0) << entry.path() << ": " << r.err;
  }
  EXPECT_GE(seen, 5);
}
