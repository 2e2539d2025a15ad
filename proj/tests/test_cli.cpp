/*
 Copyright 2026 The riskmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

fs::path scratch(const std::string& name) {
  const fs::path d = fs::path(testing::TempDir()) / ("riskmpc_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunResult run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const fs::path d = fs::path(testing::TempDir()) / "riskmpc_cli_io";
  fs::create_directories(d);
  const fs::path o = d / ("out" + std::to_string(counter) + ".txt");
  const fs::path e = d / ("err" + std::to_string(counter++) + ".txt");
  const std::string cmd = env + " " + RISKMPC_CLI_PATH + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

// Every regular file under dir, keyed by name, excluding the manifest's
// output_dir echo (which names the directory itself).
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() != ".json") files[e.path().filename().string()] = slurp(e.path());
  }
  return files;
}

}  // namespace

TEST(Cli, CheckPasses) {
  const RunResult r = run("check");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, RiskEvalMatchesTopKOracle) {
  // AV@R at level 2/5 of five equally likely outcomes is the mean of the two largest.
  const RunResult r = run("risk-eval --risk avar_exact --alpha 0.4 --values 3,-1,7,2,5");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["value"].get<double>(), 6.0, 1e-12);
  const RunResult m = run("risk-eval --values 1,4 --probs 0.25,0.75");
  ASSERT_EQ(m.code, 0) << m.err;
  EXPECT_NEAR(nlohmann::json::parse(m.out)["value"].get<double>(), 3.25, 1e-15);
}

TEST(Cli, RiskEvalRejectsBadInput) {
  EXPECT_EQ(run("risk-eval --values 1,x").code, 2);
  EXPECT_EQ(run("risk-eval --values 1,2 --probs 1").code, 2);
  EXPECT_EQ(run("risk-eval --risk avar_exact --alpha 1.5 --values 1,2").code, 2);
  EXPECT_EQ(run("risk-eval --risk nope --values 1").code, 2);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("solve --no-such-flag").code, 2);
}

TEST(Cli, MissingFieldNamesItsPath) {
  const fs::path d = scratch("missing");
  const RunResult r = run("solve --problem example1 --risk expectation --out " + d.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'horizon'"), std::string::npos) << r.err;
  const RunResult a = run("solve --problem example1 --risk avar_softplus -N 2 --out " + d.string());
  EXPECT_EQ(a.code, 2);
  EXPECT_NE(a.err.find("'risk.alpha'"), std::string::npos) << a.err;
  const RunResult t = run("turnpike --problem example1 --risk expectation --out " + d.string());
  EXPECT_EQ(t.code, 2);
  EXPECT_NE(t.err.find("'horizons'"), std::string::npos) << t.err;
}

TEST(Cli, UnknownFieldsAreRejected) {
  const fs::path d = scratch("unknown");
  nlohmann::json j = {{"problem", {{"name", "example1"}}},
                      {"risk", {{"kind", "expectation"}, {"beta", 1}}},
                      {"horizon", 2},
                      {"output_dir", (d / "o").string()}};
  RunResult r = run("solve --config " + write_config(d, j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'risk.beta'"), std::string::npos) << r.err;
  j["risk"].erase("beta");
  j["horizn"] = 3;
  r = run("solve --config " + write_config(d, j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'horizn'"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(d / "o"));
}

TEST(Cli, MalformedValuesAreRejected) {
  const fs::path d = scratch("malformed");
  std::ofstream(d / "bad.json") << "{\"problem\": ";
  EXPECT_EQ(run("solve --config " + (d / "bad.json").string()).code, 2);
  EXPECT_EQ(run("solve --config " + (d / "absent.json").string()).code, 2);
  const std::string base = " --risk expectation -N 2 --out " + d.string();
  EXPECT_EQ(run("solve --problem example3" + base).code, 2);
  EXPECT_EQ(run("solve --problem example1 --x0 1,2" + base).code, 2);
  EXPECT_EQ(run("solve --problem example1 --horizon 0 --risk expectation --out " + d.string()).code, 2);
  EXPECT_EQ(run("mpc --problem example1 --algorithm greedy" + base).code, 2);
  EXPECT_EQ(run("mpc --problem example1 --theta 1" + base).code, 2);
  EXPECT_EQ(run("solve --problem example1" + base, "RISKMPC_JOBS=zero").code, 2);
}

TEST(Cli, SolveWritesTreeAndMatchesRiccati) {
  const fs::path d = scratch("solve");
  const RunResult r = run("solve --problem example1 --risk expectation -N 3 --x0 1.5 --out " + d.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_csv(d / "ocp_solution.csv");
  ASSERT_EQ(rows.size(), 16u);  // header + 1 + 2 + 4 + 8 nodes
  EXPECT_EQ(rows[0], (std::vector<std::string>{"node", "depth", "prob", "state", "control"}));
  EXPECT_EQ(rows[1][3], "1.5");
  EXPECT_NEAR(std::stod(rows[1][4]), -test_support::riccati_gain(1.5, 1.0, 1.0, 5.0, 3) * 1.5, 1e-6);
  for (std::size_t i = 8; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][1], "3");
    EXPECT_EQ(rows[i][4], "") << "leaf " << i << " has a control";
  }
  EXPECT_EQ(read_csv(d / "stage_summary.csv").size(), 4u);
  const auto m = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_TRUE(m["diagnostics"]["converged"].get<bool>());
  EXPECT_EQ(m["nodes"].get<int>(), 15);
  for (const auto& e : fs::directory_iterator(d)) EXPECT_NE(e.path().extension(), ".tmp");
}

TEST(Cli, FlagsOverrideConfig) {
  const fs::path d = scratch("override");
  const nlohmann::json j = {{"problem", {{"name", "example1"}}},
                            {"risk", {{"kind", "avar_softplus"}, {"alpha", 0.05}}},
                            {"horizon", 5},
                            {"output_dir", (d / "cfg").string()}};
  const fs::path cfg = write_config(d, j);
  ASSERT_EQ(run("solve --config " + cfg.string() + " -N 2 --risk expectation --out " + (d / "flag").string()).code, 0);
  EXPECT_EQ(read_csv(d / "flag" / "ocp_solution.csv").size(), 8u);
  EXPECT_FALSE(fs::exists(d / "cfg"));
  const auto m = nlohmann::json::parse(slurp(d / "flag" / "manifest.json"));
  EXPECT_EQ(m["config"]["risk"]["kind"], "expectation");
  EXPECT_FALSE(m["config"]["risk"].contains("alpha"));
}

TEST(Cli, ExactPropagationOverAtomCapIsResourceError) {
  const fs::path d = scratch("cap");
  const nlohmann::json j = {{"problem", {{"name", "example1"}}}, {"risk", {{"kind", "expectation"}}},
                            {"horizon", 2},  {"steps", 4},
                            {"atom_cap", 3}, {"algorithm", "abstract"},
                            {"output_dir", d.string()}};
  const RunResult r = run("mpc --config " + write_config(d, j).string());
  EXPECT_EQ(r.code, 4) << r.err;
}

TEST(Cli, MpcTraceLayout) {
  const fs::path d = scratch("mpc");
  ASSERT_EQ(run("mpc --problem example1 --risk expectation -N 3 -K 4 -M 3 --out " + d.string()).code, 0);
  const auto rows = read_csv(d / "mpc_trace.csv");
  ASSERT_EQ(rows.size(), 1u + 3u * 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"path", "step", "state", "control", "noise", "stage_cost_eval",
                                               "stage_cost_theta"}));
  // x_{j+1} = 1.5 x_j + u_j + w_j along every path.
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    if (rows[i][0] != rows[i + 1][0]) continue;
    const double next = 1.5 * std::stod(rows[i][2]) + std::stod(rows[i][3]) + std::stod(rows[i][4]);
    EXPECT_NEAR(std::stod(rows[i + 1][2]), next, 1e-12);
  }
  EXPECT_EQ(read_csv(d / "mpc_stages.csv").size(), 5u);
}

TEST(Cli, SweepGridAndCellFiles) {
  const fs::path d = scratch("sweep");
  const nlohmann::json j = {
      {"problem", {{"name", "example1"}}},
      {"risk", {{"kind", "avar_softplus"}, {"alpha", 0.05}}},
      {"horizons", {2, 3}},
      {"n_long", 5},
      {"steps", 3},
      {"mc_paths", 2},
      {"thetas", {{{"label", "ts"}}, {{"label", "half"}, {"scale", 0.5}}, {{"label", "one"}, {"value", 1.0}}}},
      {"output_dir", d.string()}};
  const RunResult r = run("sweep --config " + write_config(d, j).string() + " --jobs 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_csv(d / "sweep.csv");
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[1][1], "2");
  EXPECT_EQ(rows[4][1], "3");
  EXPECT_EQ(rows[2][2], "half");
  EXPECT_NEAR(std::stod(rows[2][3]), 0.5 * std::stod(rows[1][3]), 1e-12);
  EXPECT_EQ(rows[3][3], "1");
  for (int i = 0; i < 6; ++i) EXPECT_TRUE(fs::exists(d / ("sweep_cell_" + std::to_string(i) + "_trace.csv")));
}

TEST(Cli, TurnpikeFiles) {
  const fs::path d = scratch("turnpike");
  ASSERT_EQ(run("turnpike --problem example1 --risk expectation --horizons 3,5 --n-long 5 --out " + d.string()).code, 0);
  const auto dist = read_csv(d / "turnpike_distances.csv");
  EXPECT_EQ(dist.size(), 1u + 4u + 6u);
  const auto paths = read_csv(d / "turnpike_paths.csv");
  EXPECT_EQ(paths.size(), 1u + 8u * 4u + 32u * 6u);
  const auto m = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(m["stationary"]["stage_index"].get<int>(), 2);
}

TEST(Cli, RerunsAreByteIdentical) {
  const std::vector<std::string> commands = {
      "solve --problem example2 --risk kl_divergence --c 0.5 -N 3",
      "turnpike --problem example2 --risk avar_softplus --alpha 0.1 --horizons 3,4 --n-long 5",
      "mpc --problem example2 --risk kl_divergence --c 0.5 -N 3 -K 3 -M 3",
      "mpc --problem example1 --risk expectation -N 3 -K 3 --exact",
      "mpc --problem example2 --risk avar_softplus --alpha 0.1 -N 3 -K 3 -M 2 --algorithm risk_averse_fixed_theta "
      "--n-long 5",
      "sweep --problem example1 --risk avar_softplus --alpha 0.05 --horizons 2,3 --n-long 5 -K 2 -M 2"};
  for (std::size_t i = 0; i < commands.size(); ++i) {
    const fs::path d = scratch("rerun" + std::to_string(i));
    ASSERT_EQ(run(commands[i] + " --out " + (d / "a").string()).code, 0) << commands[i];
    ASSERT_EQ(run(commands[i] + " --out " + (d / "b").string() + " --jobs 2").code, 0) << commands[i];
    const auto a = snapshot(d / "a"), b = snapshot(d / "b");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b) << commands[i];
    // Same output directory twice gives an identical manifest too.
    const std::string m1 = slurp(d / "a" / "manifest.json");
    ASSERT_EQ(run(commands[i] + " --out " + (d / "a").string()).code, 0);
    EXPECT_EQ(slurp(d / "a" / "manifest.json"), m1) << commands[i];
  }
}
