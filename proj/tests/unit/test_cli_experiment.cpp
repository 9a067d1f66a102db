#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "mechkit/experiment.hpp"

using namespace mechkit;

namespace {

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

std::string error_of(const std::string& text) {
  try {
    parse_experiment(text, "x.json");
  } catch (const InvalidInput& e) {
    return e.what();
  }
  return "";
}

#ifdef MECHKIT_CLI_PATH
std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(MECHKIT_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
#endif

}  // namespace

TEST(Experiment, ParameterNotInPipelineIsReportedWithPath) {
  const auto msg = error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "dc",
    "grid": [{"ell": 2}, {"gamma": 0.1}], "seeds": [1]})");
  EXPECT_NE(msg.find("x.json:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("/grid/1"), std::string::npos) << msg;
  EXPECT_NE(msg.find("parameter 'gamma' does not apply to pipeline 'dc'"), std::string::npos) << msg;
}

TEST(Experiment, MalformedFilesAreRejected) {
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "dc", "grid": []})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "warp", "grid": [], "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "dc", "grid": [], "sweep": {}, "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "dc", "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "general", "grid": [{"mode": "empirical"}], "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "nope"}, "pipeline": "ideal", "grid": [{}], "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "ideal", "grid": [{"ell": 0}], "seeds": [1]})"), "");
  EXPECT_NE(error_of(R"({"instance": {"builtin": "ex1"}, "pipeline": "ideal", "grid": [{}], "seeds": [1], "samples": 0})"), "");
}

TEST(Experiment, EmptyGridGivesHeaderOnly) {
  const auto s = parse_experiment(R"({"instance": {"builtin": "ex1"}, "pipeline": "ideal", "grid": [], "seeds": [1, 2]})");
  const auto rep = run_experiment(s);
  EXPECT_TRUE(rep.rows.empty());
  EXPECT_EQ(count_lines(rep.csv), 3u);
  EXPECT_EQ(rep.csv.rfind("# mechkit 1.0.0 schema 1\n", 0), 0u);
  EXPECT_TRUE(rep.all_pass);
}

TEST(Experiment, SweepIsCartesianTimesSeeds) {
  const auto s = parse_experiment(R"({"instance": {"builtin": "second_price"}, "pipeline": "general",
    "sweep": {"eps": [0.01, 0.04, 0.16], "gamma": [0.05, 0.1]}, "seeds": [1, 2]})");
  ASSERT_EQ(s.points.size(), 6u);
  const auto rep = run_experiment(s);
  EXPECT_EQ(rep.rows.size(), 12u);
  EXPECT_EQ(count_lines(rep.csv), 3u + 12u);
  EXPECT_TRUE(rep.all_pass);
  for (auto& r : rep.rows) {
    EXPECT_LE(r.max_regret, 1e-7);
    EXPECT_GE(r.min_ir, -1e-7);
  }
}

TEST(Experiment, InstanceOverridesReachTheBuiltin) {
  const auto s = parse_experiment(R"({"instance": {"builtin": "ex1"}, "pipeline": "baseline",
    "grid": [{"ell": 2, "instance.sigma": 0.2, "instance.eps": 0.1}], "seeds": [1]})");
  const auto rep = run_experiment(s);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_NEAR(rep.rows[0].input_revenue, 1.0 - 0.2 - 0.2 * 0.1, 1e-15);
  EXPECT_NE(rep.csv.find("instance.sigma"), std::string::npos);
}

TEST(Experiment, RerunIsByteIdenticalAndSeedMatters) {
  const std::string text = R"({"instance": {"builtin": "ex1_sigma25"}, "pipeline": "dc",
    "grid": [{"ell": 2, "d": 2, "delta": 0.05}], "seeds": [SEED], "samples": 400})";
  auto with_seed = [&](const std::string& seed) {
    std::string t = text;
    t.replace(t.find("SEED"), 4, seed);
    return run_experiment(parse_experiment(t)).csv;
  };
  const auto a = with_seed("7"), b = with_seed("7"), c = with_seed("8");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Experiment, NonidealTheoremLIsRecorded) {
  const auto s = parse_experiment(R"({"instance": {"builtin": "ex3"}, "pipeline": "nonideal",
    "grid": [{"eps": 0.1, "L": 20}], "seeds": [1]})");
  const auto rep = run_experiment(s);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].params["L_theorem"].get<std::uint64_t>(), NonIdealConfig::theorem_L(0.1, 1, 2));
  EXPECT_TRUE(rep.rows[0].bic_pass);
}

TEST(Cli, ExitCodesAndDeterministicOutput) {
#ifndef MECHKIT_CLI_PATH
  GTEST_SKIP() << "CLI path not configured";
#else
  const std::string dir = testing::TempDir();
  EXPECT_EQ(run_cli("examples ex3 --out " + dir + "ex3a.txt"), 0);
  EXPECT_EQ(run_cli("examples ex3 --out " + dir + "ex3b.txt"), 0);
  EXPECT_EQ(slurp(dir + "ex3a.txt"), slurp(dir + "ex3b.txt"));
  EXPECT_EQ(run_cli("transform dc --config " + dir + "does_not_exist.json"), 2);
  EXPECT_EQ(run_cli("transform dc --builtin ex1 --config x.json"), 2);
  EXPECT_EQ(run_cli("verify --builtin first_price --which bic --mode exact"), 1);
  EXPECT_EQ(run_cli("verify --builtin second_price --which bic --mode exact"), 0);
  const std::string args = "race bench --m 3 --delta 0.5 --h 1 --means 0.2,-0.3,0.5 --samples 2000 --seed 4 --out ";
  EXPECT_EQ(run_cli(args + dir + "rb1.csv"), 0);
  EXPECT_EQ(run_cli(args + dir + "rb2.csv"), 0);
  EXPECT_EQ(slurp(dir + "rb1.csv"), slurp(dir + "rb2.csv"));
  EXPECT_FALSE(slurp(dir + "rb1.csv").empty());
#endif
}
