#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "uflow/errors.hpp"
#include "uflow/scenario.hpp"

using namespace uflow;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("uflow_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path scenario(const std::string& name) { return fs::path(UFLOW_SCENARIO_DIR) / name; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(UFLOW_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kBall = R"({"system": {"name": "ball"}, "initial": {"q": [0.5], "qd": [0.0]}, "sim": {"t_final": 2.4}})";

}  // namespace

TEST(Config, DefaultsAreFilledIn) {
  const auto c = parse_config(kBall);
  EXPECT_EQ(c.system, "ball");
  EXPECT_DOUBLE_EQ(c.params.at("gamma"), 0.5);
  EXPECT_DOUBLE_EQ(c.sim.t_final, 2.4);
  EXPECT_DOUBLE_EQ(c.sim.rel_tol, 1e-12);
  EXPECT_TRUE(c.J.empty());
  EXPECT_FALSE(c.section.has_value());
}

TEST(Config, SchemaErrorsNameTheKey) {
  const std::vector<std::pair<std::string, std::string>> bad = {
      {R"({"system": {"name": "ball"}, "initial": {"q": [0.5], "qd": [0.0]}, "colour": 1})", "colour"},
      {R"({"system": {"name": "ball"}, "initial": {"q": [0.5, 1.0], "qd": [0.0]}})", "initial.q"},
      {R"({"system": {"name": "ball"}, "initial": {"q": [0.5], "qd": [0.0]}, "sim": {"rel_tol": "x"}})", "rel_tol"},
      {R"({"system": {"name": "nope"}, "initial": {"q": [0.5], "qd": [0.0]}})", "nope"},
      {R"({"system": {"name": "ball", "params": {"mas": 1}}, "initial": {"q": [0.5], "qd": [0.0]}})", "mas"},
      {R"({"system": {"name": "ball"}, "initial": {"q": [0.5], "qd": [0.0]}, "sim": {"t_final": -1}})", "t_final"},
      {"{not json", ""},
  };
  for (const auto& [text, key] : bad) {
    try {
      parse_config(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
}

// Property: dump is a fixed point of parse o dump for every shipped scenario.
TEST(Config, DumpRoundTrip) {
  for (const auto& entry : fs::directory_iterator(UFLOW_SCENARIO_DIR)) {
    const auto c = load_config(entry.path());
    const std::string once = dump_config(c);
    EXPECT_EQ(dump_config(parse_config(once)), once) << entry.path();
  }
}

TEST(Config, DumpedConfigReproducesTrajectoryBitwise) {
  const auto c = load_config(scenario("corner_bderiv.json"));
  const auto a = scratch("dump_a");
  const auto b = scratch("dump_b");
  ASSERT_EQ(cmd_simulate(c, a), kExitOk);
  ASSERT_EQ(cmd_simulate(parse_config(dump_config(c)), b), kExitOk);
  const std::string csv = slurp(a / "trajectory.csv");
  EXPECT_FALSE(csv.empty());
  EXPECT_EQ(csv, slurp(b / "trajectory.csv"));
  EXPECT_EQ(slurp(a / "events.json"), slurp(b / "events.json"));
}

TEST(Simulate, WritesTrajectoryAndEvents) {
  const auto out = scratch("simulate");
  ASSERT_EQ(cmd_simulate(parse_config(kBall), out), kExitOk);
  const json ev = json::parse(slurp(out / "events.json"));
  EXPECT_EQ(ev["termination"], "time_reached");
  ASSERT_EQ(ev["events"].size(), 2u);
  EXPECT_NEAR(ev["events"][0]["t"].get<double>(), 1.0, 1e-9);

  std::istringstream csv(slurp(out / "trajectory.csv"));
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "t,q_0,qd_0,mode_bitmask,event");
  int rows = 0, pre = 0, post = 0;
  double t_prev = -1.0;
  for (std::string line; std::getline(csv, line);) {
    ++rows;
    const double t = std::stod(line.substr(0, line.find(',')));
    EXPECT_GE(t, t_prev) << "row " << rows;
    t_prev = t;
    const char last = line.back();
    pre += last == '1';
    post += last == '2';
  }
  EXPECT_EQ(pre, 2);
  EXPECT_EQ(post, 2);
  EXPECT_EQ(rows, 241 + 4);
}

TEST(Simulate, RestingBallHasNoEvents) {
  const auto out = scratch("resting");
  ASSERT_EQ(cmd_simulate(load_config(scenario("resting_ball.json")), out), kExitOk);
  EXPECT_TRUE(json::parse(slurp(out / "events.json"))["events"].empty());
}

TEST(Bderiv, ValidationResidualsAreSmall) {
  const auto out = scratch("bderiv");
  RunOptions opt;
  opt.validate = true;
  ASSERT_EQ(cmd_bderiv(load_config(scenario("corner_bderiv.json")), out, opt), kExitOk);
  const json j = json::parse(slurp(out / "bderiv.json"));
  EXPECT_EQ(j["selections"].size(), 3u);
  EXPECT_LT(j["max_residual"].get<double>(), 1e-5);
  EXPECT_FALSE(j["orthogonality_violation"].get<bool>());
}

TEST(Analyze, PlMapVerdicts) {
  const auto out = scratch("plmap");
  ASSERT_EQ(cmd_analyze(load_config(scenario("pl_unstable.json")), out), kExitOk);
  const json r = json::parse(slurp(out / "report.json"));
  EXPECT_EQ(r["pl_map"]["instability"]["verdict"], "UNSTABLE");
}

TEST(WriteAtomic, ReplacesContent) {
  const auto dir = scratch("atomic");
  write_atomic(dir / "f.txt", "one");
  write_atomic(dir / "f.txt", "two");
  EXPECT_EQ(slurp(dir / "f.txt"), "two");
  for (const auto& e : fs::directory_iterator(dir)) EXPECT_EQ(e.path().filename(), "f.txt");
}

TEST(ListSystems, IsJsonArray) {
  const json j = json::parse(list_systems_json());
  ASSERT_TRUE(j.is_array());
  EXPECT_GE(j.size(), 7u);
  EXPECT_TRUE(j[0].contains("name"));
  EXPECT_TRUE(j[0].contains("params"));
}

TEST(Cli, ExitCodes) {
  const auto out = scratch("cli");
  const std::string o = " --out " + out.string();
  EXPECT_EQ(run_cli("simulate --config " + scenario("ball.json").string() + o), 0);
  EXPECT_EQ(run_cli("simulate --config " + scenario("ball_zeno.json").string() + o), kExitZeno);
  EXPECT_EQ(run_cli("simulate --config " + scenario("grazing.json").string() + o), kExitGrazing);
  const json ev = json::parse(slurp(out / "events.json"));
  EXPECT_EQ(ev["offending_constraint"], 0);
  EXPECT_EQ(run_cli("simulate --config /nonexistent.json" + o), kExitSchema);
  EXPECT_EQ(run_cli("simulate" + o), kExitSchema);
  EXPECT_EQ(run_cli("frobnicate"), kExitSchema);
  const fs::path bad = out / "bad.json";
  std::ofstream(bad) << R"({"system": {"name": "ball"}, "initial": {"q": [0.5], "qd": [0.0]}, "extra": 1})";
  EXPECT_EQ(run_cli("simulate --config " + bad.string() + o), kExitSchema);
  EXPECT_EQ(run_cli("simulate --dump-config --config " + scenario("ball.json").string()), 0);
  EXPECT_EQ(run_cli("list-systems"), 0);
}
