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

// riskmpc command-line tool: OCP solves, turnpike data, closed-loop runs
// and sweeps, written as CSV plus a JSON manifest per output directory.
//
// Exit codes: 0 success, 2 configuration error, 3 solver failure,
// 4 resource cap exceeded.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "riskmpc/mpc.hpp"
#include "riskmpc/turnpike.hpp"

#ifndef RISKMPC_VERSION
#define RISKMPC_VERSION "unknown"
#endif
#ifndef RISKMPC_GIT_REV
#define RISKMPC_GIT_REV "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace riskmpc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitSolver = 3;
constexpr int kExitResource = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Output files. Each file is written to a temporary name and renamed on close,
// so a directory never holds a partial CSV.

class AtomicFile {
 public:
  explicit AtomicFile(fs::path path) : path_(std::move(path)), tmp_(path_.string() + ".tmp") {
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open " + tmp_.string() + " for writing");
  }
  ~AtomicFile() {
    if (out_.is_open()) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }
  std::ostream& stream() { return out_; }
  void commit() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed for " + path_.string());
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_, tmp_;
  std::ofstream out_;
};

class Csv {
 public:
  Csv(const fs::path& path, const std::vector<std::string>& header) : file_(path) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) file_.stream() << (i ? "," : "") << cells[i];
    file_.stream() << '\n';
  }
  void commit() { file_.commit(); }

 private:
  AtomicFile file_;
};

void write_json(const fs::path& path, const json& j) {
  AtomicFile f(path);
  f.stream() << j.dump(2) << '\n';
  f.commit();
}

std::vector<std::string> indexed(const std::string& stem, std::size_t n) {
  std::vector<std::string> out;
  if (n == 1) {
    out.push_back(stem);
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(stem + "_" + std::to_string(i));
  }
  return out;
}

void append(std::vector<std::string>& row, std::span<const double> v) {
  for (double x : v) row.push_back(fmt(x));
}

// ---------------------------------------------------------------------------
// Run configuration: JSON (file and/or flags), validated strictly.

struct ThetaChoice {
  std::string label;
  std::string mode;  // "stationary", "value", "offset", "scale"
  std::vector<double> values;
};

struct RunConfig {
  std::string problem;
  double gamma = 15.0;
  RiskSpec risk;
  RiskSpec evaluation;
  int horizon = 0;
  std::vector<int> horizons;
  std::vector<double> x0{1.5};
  int steps = 100;
  int mc_paths = 200;
  std::uint64_t seed = 1;
  std::optional<Algorithm> algorithm;
  std::vector<double> theta;
  std::vector<ThetaChoice> thetas;
  int n_long = 13;
  bool warm_start = true;
  bool exact_propagation = false;
  std::size_t atom_cap = 4096;
  double dedup_tol = 1e-9;
  double order = 2.0;
  std::vector<double> thresholds{1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01};
  std::string output_dir;
  int jobs = 1;
  json echo;
};

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("config: unknown field '" + where + it.key() + "'");
  }
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.contains(key)) throw ConfigError("config: missing required field '" + path + "'");
  return obj.at(key);
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("config: field '" + path + "' must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError("config: field '" + path + "' must be finite");
  return d;
}

long long as_integer(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError("config: field '" + path + "' must be an integer");
  return v.get<long long>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("config: field '" + path + "' must be a string");
  return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("config: field '" + path + "' must be true or false");
  return v.get<bool>();
}

std::vector<double> as_numbers(const json& v, const std::string& path) {
  if (v.is_number()) return {as_number(v, path)};
  if (!v.is_array()) throw ConfigError("config: field '" + path + "' must be a number or an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_number(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

RiskSpec parse_risk(const json& v, const std::string& path) {
  if (!v.is_object()) throw ConfigError("config: field '" + path + "' must be an object");
  reject_unknown(v, path + ".", {"kind", "alpha", "c"});
  const std::string kind = as_string(require(v, "kind", path + ".kind"), path + ".kind");
  auto num = [&](const char* key) { return as_number(require(v, key, path + "." + key), path + "." + key); };
  try {
    if (kind == "expectation") return RiskSpec::expectation();
    if (kind == "avar_exact") return RiskSpec::avar_exact(num("alpha"));
    if (kind == "avar_softplus") return RiskSpec::avar_softplus(num("alpha"));
    if (kind == "kl_divergence") return RiskSpec::kl_divergence(num("c"));
  } catch (const InvalidArgument& e) {
    throw ConfigError("config: field '" + path + "': " + e.what());
  }
  throw ConfigError("config: field '" + path + ".kind' must be one of expectation, avar_exact, avar_softplus, "
                    "kl_divergence (got '" + kind + "')");
}

json risk_json(const RiskSpec& s) {
  json j{{"kind", to_string(s.kind)}};
  if (s.kind == RiskKind::kAvarExact || s.kind == RiskKind::kAvarSoftplus) j["alpha"] = s.alpha;
  if (s.kind == RiskKind::kKlDivergence) j["c"] = s.c;
  return j;
}

int positive_int(const json& v, const std::string& path) {
  const long long n = as_integer(v, path);
  if (n < 1 || n > 1000000000) throw ConfigError("config: field '" + path + "' must be a positive integer");
  return static_cast<int>(n);
}

RunConfig parse_config(const json& j, const std::string& command) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  reject_unknown(j, "", {"problem", "risk", "evaluation", "horizon", "horizons", "x0", "steps", "mc_paths", "seed",
                         "algorithm", "theta", "thetas", "n_long", "warm_start", "exact_propagation", "atom_cap",
                         "dedup_tol", "order", "thresholds", "output_dir", "jobs"});
  RunConfig c;
  const json& prob = require(j, "problem", "problem");
  if (!prob.is_object()) throw ConfigError("config: field 'problem' must be an object");
  reject_unknown(prob, "problem.", {"name", "gamma"});
  c.problem = as_string(require(prob, "name", "problem.name"), "problem.name");
  if (prob.contains("gamma")) c.gamma = as_number(prob["gamma"], "problem.gamma");
  if (c.problem != "example1" && c.problem != "example2") {
    throw ConfigError("config: field 'problem.name' must be example1 or example2 (got '" + c.problem + "')");
  }
  if (!(c.gamma >= 0.0)) throw ConfigError("config: field 'problem.gamma' must be >= 0");
  c.risk = parse_risk(require(j, "risk", "risk"), "risk");
  c.evaluation = j.contains("evaluation") ? parse_risk(j["evaluation"], "evaluation") : c.risk;
  c.output_dir = as_string(require(j, "output_dir", "output_dir"), "output_dir");
  if (c.output_dir.empty()) throw ConfigError("config: field 'output_dir' must not be empty");

  const bool needs_horizon = command == "solve" || command == "mpc";
  const bool needs_horizons = command == "turnpike" || command == "sweep";
  if (needs_horizon || j.contains("horizon")) c.horizon = positive_int(require(j, "horizon", "horizon"), "horizon");
  if (needs_horizons || j.contains("horizons")) {
    const json& h = require(j, "horizons", "horizons");
    if (!h.is_array() || h.empty()) throw ConfigError("config: field 'horizons' must be a non-empty array");
    for (std::size_t i = 0; i < h.size(); ++i) c.horizons.push_back(positive_int(h[i], "horizons[" + std::to_string(i) + "]"));
  }
  if (j.contains("x0")) c.x0 = as_numbers(j["x0"], "x0");
  if (j.contains("steps")) c.steps = positive_int(j["steps"], "steps");
  if (j.contains("mc_paths")) c.mc_paths = positive_int(j["mc_paths"], "mc_paths");
  if (j.contains("seed")) {
    const long long s = as_integer(j["seed"], "seed");
    if (s < 0) throw ConfigError("config: field 'seed' must be >= 0");
    c.seed = static_cast<std::uint64_t>(s);
  }
  if (j.contains("algorithm")) {
    try {
      c.algorithm = parse_algorithm(as_string(j["algorithm"], "algorithm"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("config: field 'algorithm': ") + e.what());
    }
  }
  if (j.contains("theta")) c.theta = as_numbers(j["theta"], "theta");
  if (j.contains("thetas")) {
    const json& t = j["thetas"];
    if (!t.is_array() || t.empty()) throw ConfigError("config: field 'thetas' must be a non-empty array");
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::string path = "thetas[" + std::to_string(i) + "]";
      if (!t[i].is_object()) throw ConfigError("config: field '" + path + "' must be an object");
      reject_unknown(t[i], path + ".", {"label", "value", "offset", "scale"});
      ThetaChoice tc;
      tc.label = as_string(require(t[i], "label", path + ".label"), path + ".label");
      int modes = 0;
      for (const char* m : {"value", "offset", "scale"}) {
        if (t[i].contains(m)) {
          ++modes;
          tc.mode = m;
          tc.values = as_numbers(t[i][m], path + "." + m);
        }
      }
      if (modes > 1) throw ConfigError("config: field '" + path + "' takes at most one of value, offset, scale");
      if (modes == 0) tc.mode = "stationary";
      c.thetas.push_back(std::move(tc));
    }
  }
  if (j.contains("n_long")) c.n_long = positive_int(j["n_long"], "n_long");
  if (c.n_long < 5) throw ConfigError("config: field 'n_long' must be >= 5");
  if (j.contains("warm_start")) c.warm_start = as_bool(j["warm_start"], "warm_start");
  if (j.contains("exact_propagation")) c.exact_propagation = as_bool(j["exact_propagation"], "exact_propagation");
  if (j.contains("atom_cap")) c.atom_cap = static_cast<std::size_t>(positive_int(j["atom_cap"], "atom_cap"));
  if (j.contains("dedup_tol")) {
    c.dedup_tol = as_number(j["dedup_tol"], "dedup_tol");
    if (c.dedup_tol < 0.0) throw ConfigError("config: field 'dedup_tol' must be >= 0");
  }
  if (j.contains("order")) {
    c.order = as_number(j["order"], "order");
    if (!(c.order >= 1.0)) throw ConfigError("config: field 'order' must be >= 1");
  }
  if (j.contains("thresholds")) c.thresholds = as_numbers(j["thresholds"], "thresholds");
  if (j.contains("jobs")) c.jobs = positive_int(j["jobs"], "jobs");

  // Normalized echo for the manifest (jobs and output_dir do not change results).
  c.echo = j;
  c.echo.erase("jobs");
  c.echo["risk"] = risk_json(c.risk);
  c.echo["evaluation"] = risk_json(c.evaluation);
  return c;
}

Problem make(const RunConfig& c) {
  Problem p = make_problem(c.problem, c.gamma);
  if (c.x0.size() != p.state_dim) {
    throw ConfigError("config: field 'x0' must have " + std::to_string(p.state_dim) + " component(s)");
  }
  return p;
}

json manifest_base(const RunConfig& c, const std::string& command) {
  return json{{"tool", "riskmpc"},
              {"version", RISKMPC_VERSION},
              {"revision", RISKMPC_GIT_REV},
              {"command", command},
              {"config", c.echo}};
}

json diagnostics_json(const OcpDiagnostics& d) {
  return json{{"iterations", d.iterations},
              {"evaluations", d.evaluations},
              {"grad_inf", d.grad_inf},
              {"objective", d.objective},
              {"converged", d.converged},
              {"status", d.status}};
}

json stationary_json(const StationaryEstimate& s) {
  return json{{"stage_cost", s.stage_cost},
              {"theta_s", s.theta_s},
              {"source_horizon", s.source_horizon},
              {"stage_index", s.stage_index},
              {"state_atoms", s.x_dist.atoms()},
              {"state_probs", s.x_dist.probs()}};
}

void require_solved(const OcpSolution& sol, const std::string& what) {
  if (!sol.diagnostics.converged) {
    throw SolverError(what + ": OCP did not converge (" + sol.diagnostics.status + ")", sol.decision.controls,
                      sol.diagnostics.objective);
  }
}

// ---------------------------------------------------------------------------
// Subcommands.

void write_tree_solution(const fs::path& dir, const Problem& p, const ScenarioTree& t, const OcpSolution& sol,
                         const OcpCost& cost, const RiskSpec& evaluation) {
  const std::size_t n = p.state_dim, mc = p.control_dim;
  std::vector<std::string> header{"node", "depth", "prob"};
  for (const auto& h : indexed("state", n)) header.push_back(h);
  for (const auto& h : indexed("control", mc)) header.push_back(h);
  Csv nodes(dir / "ocp_solution.csv", header);
  for (std::size_t i = 0; i < t.node_count(); ++i) {
    std::vector<std::string> row{std::to_string(i), std::to_string(t.depth[i]), fmt(t.prob[i])};
    append(row, std::span<const double>(&sol.rollout.states[i * n], n));
    for (std::size_t j = 0; j < mc; ++j) {
      row.push_back(i < t.control_node_count() ? fmt(sol.decision.controls[i * mc + j]) : "");
    }
    nodes.row(row);
  }
  nodes.commit();

  const std::size_t td = static_cast<std::size_t>(cost.spec.theta_dim());
  const std::vector<double> th = stage_thetas(sol, cost);
  std::vector<std::string> sh{"stage", "risk_value", "evaluation_value", "state_mean", "state_min", "state_max"};
  for (const auto& h : indexed("theta", td)) sh.push_back(h);
  Csv stages(dir / "stage_summary.csv", sh);
  for (int k = 0; k < t.horizon; ++k) {
    const Ensemble z = stage_cost_ensemble(t, sol.rollout, k);
    const Ensemble x = state_marginal(t, sol.rollout, n, k);
    const auto [lo, hi] = std::minmax_element(x.atoms().begin(), x.atoms().end());
    std::vector<std::string> row{std::to_string(k), fmt(sol.rollout.stage_values[k]), fmt(evaluate(evaluation, z).value),
                                 fmt(mean(x)[0]), fmt(*lo), fmt(*hi)};
    if (th.size() >= (static_cast<std::size_t>(k) + 1) * td) append(row, std::span<const double>(&th[k * td], td));
    stages.row(row);
  }
  stages.commit();
}

int cmd_solve(const RunConfig& c) {
  const Problem p = make(c);
  const Ensemble x0 = Ensemble::point_mass(c.x0);
  const ScenarioTree t = build_tree(p.noise, c.horizon);
  const OcpCost cost = OcpCost::risk(c.risk);
  const OcpSolution sol = solve_ocp(p, t, x0, cost);
  require_solved(sol, "solve");
  fs::create_directories(c.output_dir);
  write_tree_solution(c.output_dir, p, t, sol, cost, c.evaluation);
  json m = manifest_base(c, "solve");
  m["nodes"] = t.node_count();
  m["objective"] = sol.rollout.objective;
  m["diagnostics"] = diagnostics_json(sol.diagnostics);
  write_json(fs::path(c.output_dir) / "manifest.json", m);
  return kExitOk;
}

int cmd_turnpike(const RunConfig& c) {
  const Problem p = make(c);
  const Ensemble x0 = Ensemble::point_mass(c.x0);
  const StationaryEstimate ref = estimate_stationary(p, c.risk, c.n_long, x0, c.evaluation, {}, c.dedup_tol);
  const std::vector<TurnpikeCurve> curves =
      turnpike_curves(p, c.risk, c.horizons, x0, ref, c.order, &c.evaluation, {}, c.jobs);
  fs::create_directories(c.output_dir);
  const fs::path dir = c.output_dir;
  const std::size_t td = static_cast<std::size_t>(c.risk.theta_dim());

  std::vector<std::string> dh{"N", "k", "d_wasserstein", "d_moment"};
  for (const auto& h : indexed("theta", td)) dh.push_back(h);
  for (const char* h : {"stage_cost", "envelope_width", "state_mean"}) dh.push_back(h);
  Csv dist(dir / "turnpike_distances.csv", dh);
  Csv paths(dir / "turnpike_paths.csv", {"N", "path", "prob", "k", "state", "control"});
  Csv exceed(dir / "turnpike_exceedance.csv", {"N", "epsilon", "count"});
  json runs = json::array();
  for (const TurnpikeCurve& cv : curves) {
    std::vector<double> d;
    for (const TurnpikeRow& r : cv.rows) {
      std::vector<std::string> row{std::to_string(r.horizon), std::to_string(r.stage), fmt(r.d_wasserstein),
                                   fmt(r.d_moment)};
      for (std::size_t i = 0; i < td; ++i) row.push_back(i < r.theta.size() ? fmt(r.theta[i]) : "");
      row.push_back(r.stage < r.horizon ? fmt(r.stage_cost) : "");
      row.push_back(fmt(r.envelope_width));
      row.push_back(fmt(r.state_mean));
      dist.row(row);
      d.push_back(r.d_wasserstein);
    }
    const auto counts = exceedance_profile(d, c.thresholds);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      exceed.row({std::to_string(cv.horizon), fmt(c.thresholds[i]), std::to_string(counts[i])});
    }
    // Every root-to-leaf path, states at stages 0..N and controls at 0..N-1.
    const ScenarioTree t = build_tree(p.noise, cv.horizon, x0.probs());
    const std::size_t leaf0 = t.level_begin(cv.horizon), leaves = t.level_end(cv.horizon) - leaf0;
    std::vector<std::size_t> chain(static_cast<std::size_t>(cv.horizon) + 1);
    for (std::size_t l = 0; l < leaves; ++l) {
      std::size_t node = leaf0 + l;
      for (int k = cv.horizon; k >= 0; --k) {
        chain[static_cast<std::size_t>(k)] = node;
        if (k > 0) node = t.parent[node];
      }
      for (int k = 0; k <= cv.horizon; ++k) {
        const std::size_t i = chain[static_cast<std::size_t>(k)];
        paths.row({std::to_string(cv.horizon), std::to_string(l), fmt(t.prob[leaf0 + l]), std::to_string(k),
                   fmt(cv.solution.rollout.states[i]), k < cv.horizon ? fmt(cv.solution.decision.controls[i]) : ""});
      }
    }
    runs.push_back(json{{"N", cv.horizon}, {"diagnostics", diagnostics_json(cv.diagnostics)}});
  }
  dist.commit();
  paths.commit();
  exceed.commit();
  json m = manifest_base(c, "turnpike");
  m["stationary"] = stationary_json(ref);
  m["runs"] = runs;
  write_json(dir / "manifest.json", m);
  return kExitOk;
}

MpcConfig mpc_config(const RunConfig& c) {
  MpcConfig m;
  m.algorithm = c.algorithm.value_or(c.theta.empty() ? Algorithm::kImplementable : Algorithm::kRiskAverseFixedTheta);
  m.horizon = c.horizon > 0 ? c.horizon : 9;
  m.steps = c.steps;
  m.risk = c.risk;
  m.evaluation = c.evaluation;
  m.mc_paths = c.mc_paths;
  m.seed = c.seed;
  m.warm_start = c.warm_start;
  m.dedup_tol = c.dedup_tol;
  m.atom_cap = c.atom_cap;
  m.jobs = c.jobs;
  return m;
}

void write_trace(const fs::path& path, const MpcTrace& tr) {
  std::vector<std::string> header{"path", "step"};
  for (const auto& h : indexed("state", tr.state_dim)) header.push_back(h);
  for (const auto& h : indexed("control", tr.control_dim)) header.push_back(h);
  for (const auto& h : indexed("noise", tr.noise_dim)) header.push_back(h);
  header.push_back("stage_cost_eval");
  header.push_back("stage_cost_theta");
  Csv csv(path, header);
  for (std::size_t i = 0; i < tr.paths; ++i) {
    for (std::size_t j = 0; j < tr.steps; ++j) {
      std::vector<std::string> row{std::to_string(i), std::to_string(j)};
      for (std::size_t d = 0; d < tr.state_dim; ++d) row.push_back(fmt(tr.state(i, j, d)));
      for (std::size_t d = 0; d < tr.control_dim; ++d) row.push_back(fmt(tr.control(i, j, d)));
      for (std::size_t d = 0; d < tr.noise_dim; ++d) row.push_back(fmt(tr.noise_at(i, j, d)));
      row.push_back(fmt(tr.stage_cost_eval[j]));
      row.push_back(fmt(tr.stage_cost_theta[j]));
      csv.row(row);
    }
  }
  csv.commit();
}

int cmd_mpc(const RunConfig& c) {
  const Problem p = make(c);
  MpcConfig m = mpc_config(c);
  json man = manifest_base(c, "mpc");
  if (m.algorithm == Algorithm::kRiskAverseFixedTheta) {
    if (c.theta.empty()) {
      const StationaryEstimate s =
          estimate_stationary(p, c.risk, c.n_long, Ensemble::point_mass(c.x0), c.evaluation, {}, c.dedup_tol);
      m.theta = s.theta_s;
      man["stationary"] = stationary_json(s);
    } else {
      m.theta = c.theta;
    }
    man["theta"] = m.theta;
  } else if (!c.theta.empty()) {
    throw ConfigError("config: field 'theta' is only used by the risk_averse_fixed_theta algorithm");
  }
  fs::create_directories(c.output_dir);
  const fs::path dir = c.output_dir;
  if (c.exact_propagation || m.algorithm == Algorithm::kAbstract) {
    const ExactClosedLoop ex = run_exact_propagation(p, m, c.x0);
    Csv st(dir / "mpc_stages.csv", {"step", "atoms", "stage_cost_eval", "stage_cost_theta"});
    for (std::size_t j = 0; j < ex.stage_cost_eval.size(); ++j) {
      st.row({std::to_string(j), std::to_string(ex.states[j].size()), fmt(ex.stage_cost_eval[j]),
              fmt(ex.stage_cost_theta[j])});
    }
    st.commit();
    man["mode"] = "exact";
    man["averaged_cost"] = ex.averaged_cost;
    man["cumulative_cost"] = ex.cumulative_cost;
    man["solves"] = ex.solves;
    man["max_atoms"] = ex.max_atoms;
  } else {
    const MpcTrace tr = run_closed_loop(p, m, c.x0);
    write_trace(dir / "mpc_trace.csv", tr);
    Csv st(dir / "mpc_stages.csv", {"step", "stage_cost_eval", "stage_stderr", "stage_cost_theta"});
    for (std::size_t j = 0; j < tr.steps; ++j) {
      st.row({std::to_string(j), fmt(tr.stage_cost_eval[j]), fmt(tr.stage_stderr[j]), fmt(tr.stage_cost_theta[j])});
    }
    st.commit();
    man["mode"] = "monte_carlo";
    man["averaged_cost"] = tr.averaged_cost;
    man["averaged_stderr"] = tr.averaged_stderr;
    man["cumulative_cost"] = tr.cumulative_cost;
    man["solves"] = tr.solves;
    man["newton_and_bfgs_iterations"] = tr.iterations;
    man["max_grad_inf"] = tr.max_grad_inf;
  }
  man["algorithm"] = to_string(m.algorithm);
  write_json(dir / "manifest.json", man);
  return kExitOk;
}

int cmd_sweep(const RunConfig& c) {
  const Problem p = make(c);
  const StationaryEstimate s =
      estimate_stationary(p, c.risk, c.n_long, Ensemble::point_mass(c.x0), c.evaluation, {}, c.dedup_tol);
  const std::size_t td = static_cast<std::size_t>(c.risk.theta_dim());
  if (td == 0) throw ConfigError("config: field 'risk.kind' must be parametric for a theta sweep");
  std::vector<ThetaChoice> choices = c.thetas;
  if (choices.empty()) choices.push_back(ThetaChoice{"theta_s", "stationary", {}});
  std::vector<SweepCell> cells;
  for (int N : c.horizons) {
    for (const ThetaChoice& tc : choices) {
      std::vector<double> th = s.theta_s;
      if (tc.mode != "stationary" && tc.values.size() != td && !(tc.mode == "scale" && tc.values.size() == 1)) {
        throw ConfigError("config: theta '" + tc.label + "' needs " + std::to_string(td) + " component(s)");
      }
      for (std::size_t i = 0; i < td; ++i) {
        const double v = tc.values.empty() ? 0.0 : tc.values[std::min(i, tc.values.size() - 1)];
        if (tc.mode == "value") th[i] = v;
        if (tc.mode == "offset") th[i] += v;
        if (tc.mode == "scale") th[i] *= v;
      }
      cells.push_back(SweepCell{N, tc.label, th});
    }
  }
  MpcConfig base = mpc_config(c);
  base.algorithm = Algorithm::kRiskAverseFixedTheta;
  base.jobs = 1;
  fs::create_directories(c.output_dir);
  const fs::path dir = c.output_dir;
  std::vector<SweepRow> rows(cells.size());
  std::mutex log_mutex;
  // Cells run on the worker pool; each writes its own trace when done.
  detail::parallel_for(cells.size(), c.jobs, [&](std::size_t i) {
    MpcConfig cfg = base;
    cfg.horizon = cells[i].horizon;
    cfg.theta = cells[i].theta;
    const MpcTrace tr = run_closed_loop(p, cfg, c.x0);
    write_trace(dir / ("sweep_cell_" + std::to_string(i) + "_trace.csv"), tr);
    SweepRow r;
    r.cell = cells[i];
    r.averaged_cost = tr.averaged_cost;
    r.std_error = tr.averaged_stderr;
    r.stationary_cost = s.stage_cost;
    r.solves = tr.solves;
    r.iterations = tr.iterations;
    r.max_grad_inf = tr.max_grad_inf;
    rows[i] = r;
    std::lock_guard<std::mutex> lock(log_mutex);
    std::fprintf(stderr, "cell %zu: N=%d theta=%s J=%.6f se=%.6f\n", i, r.cell.horizon, r.cell.theta_label.c_str(),
                 r.averaged_cost, r.std_error);
  });
  std::vector<std::string> header{"cell", "N", "theta_label"};
  for (const auto& h : indexed("theta", td)) header.push_back(h);
  for (const char* h : {"J_bar", "mc_stderr", "stationary_cost", "solves", "iterations", "max_grad_inf"}) header.push_back(h);
  Csv csv(dir / "sweep.csv", header);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const SweepRow& r = rows[i];
    std::vector<std::string> row{std::to_string(i), std::to_string(r.cell.horizon), r.cell.theta_label};
    append(row, r.cell.theta);
    row.push_back(fmt(r.averaged_cost));
    row.push_back(fmt(r.std_error));
    row.push_back(fmt(r.stationary_cost));
    row.push_back(std::to_string(r.solves));
    row.push_back(std::to_string(r.iterations));
    row.push_back(fmt(r.max_grad_inf));
    csv.row(row);
  }
  csv.commit();
  json man = manifest_base(c, "sweep");
  man["stationary"] = stationary_json(s);
  man["cells"] = cells.size();
  write_json(dir / "manifest.json", man);
  return kExitOk;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || end == item.c_str() || *end != '\0' || !std::isfinite(v)) {
      throw ConfigError(std::string("--") + what + ": '" + item + "' is not a finite number");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string("--") + what + " must not be empty");
  return out;
}

int cmd_risk_eval(const std::string& kind, double alpha, double cc, const std::string& values, const std::string& probs) {
  json r{{"kind", kind}};
  if (kind == "avar_exact" || kind == "avar_softplus") r["alpha"] = alpha;
  if (kind == "kl_divergence") r["c"] = cc;
  const RiskSpec spec = parse_risk(r, "risk");
  const std::vector<double> z = parse_list(values, "values");
  std::vector<double> w = probs.empty() ? std::vector<double>(z.size(), 1.0 / static_cast<double>(z.size()))
                                        : parse_list(probs, "probs");
  if (w.size() != z.size()) throw ConfigError("--probs must have as many entries as --values");
  Ensemble e = [&] {
    try {
      return Ensemble::scalar(z, w);
    } catch (const InvalidArgument& ex) {
      throw ConfigError(ex.what());
    }
  }();
  const RiskValue v = evaluate(spec, e);
  json out{{"risk", risk_json(spec)}, {"value", v.value}, {"theta_star", v.theta_star}};
  std::cout << out.dump() << '\n';
  return kExitOk;
}

// Independent finite-horizon LQR gain for x+ = a x + b u, cost q x^2 + r u^2.
double lqr_gain(double a, double b, double q, double r, int stages) {
  double P = 0.0, K = 0.0;
  for (int j = 0; j < stages; ++j) {
    K = b * P * a / (r + b * b * P);
    P = q + a * a * P - a * b * P * K;
  }
  return K;
}

int cmd_check(double gamma) {
  bool all = true;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    all = all && ok;
    std::printf("check %-28s %s  %s\n", name.c_str(), ok ? "pass" : "FAIL", detail.c_str());
  };
  char buf[200];
  for (const Problem& p : {make_example1(), make_example2(gamma)}) {
    const JacobianReport j = probe_jacobians(p, 200, 7);
    std::snprintf(buf, sizeof buf, "max rel error %.3g over %d probes", j.max_rel_error, j.probes);
    report("jacobians " + p.name, j.passed, buf);
  }
  {
    const Problem p = make_example1();
    const OcpCost cost = OcpCost::risk(RiskSpec::expectation());
    double worst = 0.0;
    for (int N : {3, 5, 9}) {
      for (double x : {-1.5, -0.5, 0.5, 1.5}) {
        const double u = feedback(p, cost, N, std::span<const double>(&x, 1)).control[0];
        worst = std::max(worst, std::abs(u + lqr_gain(1.5, 1.0, 1.0, 5.0, N) * x));
      }
    }
    std::snprintf(buf, sizeof buf, "max |u - (-K_N x)| = %.3g", worst);
    report("certainty equivalence", worst <= 1e-5, buf);
  }
  {
    const Problem p = make_example1();
    const DecompositionReport d = value_decomposition_check(p, Ensemble::scalar({-1.0, 0.5, 2.0}, {0.2, 0.5, 0.3}), 4);
    std::snprintf(buf, sizeof buf, "gap %.3g", d.gap);
    report("value decomposition", d.holds, buf);
  }
  {
    // AV@R of equally weighted atoms at level k/n is the mean of the k largest.
    const Ensemble z = Ensemble::uniform({3.0, -1.0, 7.0, 2.0, 5.0});
    const double v = evaluate(RiskSpec::avar_exact(0.4), z).value;
    std::snprintf(buf, sizeof buf, "AV@R_0.4 = %.17g (oracle 6)", v);
    report("avar top-k oracle", std::abs(v - 6.0) <= 1e-12, buf);
  }
  return all ? kExitOk : kExitSolver;
}

// ---------------------------------------------------------------------------
// Flags that override config fields.

struct Overrides {
  std::string config, problem, risk, evaluation, algorithm, out, x0, theta, horizons;
  double gamma = 0, alpha = 0, c = 0, eval_alpha = 0, eval_c = 0;
  int horizon = 0, steps = 0, paths = 0, n_long = 0;
  long long seed = 0;
  bool cold = false, exact = false;
  std::map<std::string, CLI::Option*> opt;

  void attach(CLI::App* app) {
    opt["config"] = app->add_option("--config", config, "JSON run configuration file");
    opt["problem"] = app->add_option("--problem", problem, "example1 or example2");
    opt["gamma"] = app->add_option("--gamma", gamma, "control weight of example2");
    opt["risk"] = app->add_option("--risk", risk, "expectation, avar_exact, avar_softplus or kl_divergence");
    opt["alpha"] = app->add_option("--alpha", alpha, "AV@R level");
    opt["c"] = app->add_option("--c", c, "KL constraint level");
    opt["evaluation"] = app->add_option("--evaluation", evaluation, "risk kind used for reporting");
    opt["eval_alpha"] = app->add_option("--eval-alpha", eval_alpha, "AV@R level of the evaluation risk");
    opt["eval_c"] = app->add_option("--eval-c", eval_c, "KL level of the evaluation risk");
    opt["horizon"] = app->add_option("--horizon,-N", horizon, "horizon N");
    opt["horizons"] = app->add_option("--horizons", horizons, "comma-separated horizons");
    opt["x0"] = app->add_option("--x0", x0, "initial state (comma-separated components)");
    opt["steps"] = app->add_option("--steps,-K", steps, "closed-loop steps K");
    opt["paths"] = app->add_option("--paths,-M", paths, "Monte Carlo paths M");
    opt["seed"] = app->add_option("--seed", seed, "noise seed");
    opt["algorithm"] = app->add_option("--algorithm", algorithm, "abstract, implementable or risk_averse_fixed_theta");
    opt["theta"] = app->add_option("--theta", theta, "fixed theta (comma-separated)");
    opt["n_long"] = app->add_option("--n-long", n_long, "horizon of the stationary estimate");
    opt["out"] = app->add_option("--out,-o", out, "output directory");
    opt["cold"] = app->add_flag("--cold", cold, "disable warm starts");
    opt["exact"] = app->add_flag("--exact", exact, "propagate the closed-loop distribution exactly");
  }

  bool given(const char* k) const { return opt.at(k)->count() > 0; }

  json apply() const {
    json j = json::object();
    if (given("config")) {
      std::ifstream in(config);
      if (!in) throw ConfigError("config: cannot read '" + config + "'");
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("config: '" + config + "' is not valid JSON: " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    }
    auto obj = [&](const char* key) -> json& {
      if (!j.contains(key)) j[key] = json::object();
      if (!j[key].is_object()) throw ConfigError(std::string("config: field '") + key + "' must be an object");
      return j[key];
    };
    if (given("problem")) obj("problem")["name"] = problem;
    if (given("gamma")) obj("problem")["gamma"] = gamma;
    if (given("risk")) {
      json& r = obj("risk");
      if (r.contains("kind") && r["kind"] != risk) r = json::object();
      r["kind"] = risk;
    }
    if (given("alpha")) obj("risk")["alpha"] = alpha;
    if (given("c")) obj("risk")["c"] = c;
    if (given("evaluation")) {
      json& r = obj("evaluation");
      if (r.contains("kind") && r["kind"] != evaluation) r = json::object();
      r["kind"] = evaluation;
    }
    if (given("eval_alpha")) obj("evaluation")["alpha"] = eval_alpha;
    if (given("eval_c")) obj("evaluation")["c"] = eval_c;
    if (given("horizon")) j["horizon"] = horizon;
    if (given("horizons")) {
      json h = json::array();
      for (double v : parse_list(horizons, "horizons")) {
        if (v != std::floor(v)) throw ConfigError("--horizons: entries must be integers");
        h.push_back(static_cast<long long>(v));
      }
      j["horizons"] = h;
    }
    if (given("x0")) j["x0"] = parse_list(x0, "x0");
    if (given("steps")) j["steps"] = steps;
    if (given("paths")) j["mc_paths"] = paths;
    if (given("seed")) j["seed"] = seed;
    if (given("algorithm")) j["algorithm"] = algorithm;
    if (given("theta")) j["theta"] = parse_list(theta, "theta");
    if (given("n_long")) j["n_long"] = n_long;
    if (given("out")) j["output_dir"] = out;
    if (cold) j["warm_start"] = false;
    if (exact) j["exact_propagation"] = true;
    return j;
  }
};

int default_jobs() {
  const char* env = std::getenv("RISKMPC_JOBS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 4096) throw ConfigError("RISKMPC_JOBS must be a positive integer");
  return static_cast<int>(v);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Risk-averse stochastic economic MPC over finite-support noise"};
  app.set_version_flag("--version", std::string(RISKMPC_VERSION) + " (" + RISKMPC_GIT_REV + ")");
  app.require_subcommand(1);
  int jobs = 0;
  app.add_option("--jobs,-j", jobs, "worker threads (default: RISKMPC_JOBS or 1)");

  Overrides solve_o, turnpike_o, mpc_o, sweep_o;
  CLI::App* solve = app.add_subcommand("solve", "solve one tree OCP");
  CLI::App* turnpike = app.add_subcommand("turnpike", "trajectory bundles and turnpike distances");
  CLI::App* mpc = app.add_subcommand("mpc", "closed-loop simulation");
  CLI::App* sweep = app.add_subcommand("sweep", "fixed-theta performance sweep");
  solve_o.attach(solve);
  turnpike_o.attach(turnpike);
  mpc_o.attach(mpc);
  sweep_o.attach(sweep);
  for (CLI::App* sc : {solve, turnpike, mpc, sweep}) sc->add_option("--jobs,-j", jobs, "worker threads");

  CLI::App* risk_eval = app.add_subcommand("risk-eval", "evaluate a risk measure on a literal ensemble");
  std::string re_kind = "expectation", re_values, re_probs;
  double re_alpha = 0.05, re_c = 0.5;
  risk_eval->add_option("--risk", re_kind, "risk kind")->capture_default_str();
  risk_eval->add_option("--alpha", re_alpha, "AV@R level")->capture_default_str();
  risk_eval->add_option("--c", re_c, "KL constraint level")->capture_default_str();
  risk_eval->add_option("--values", re_values, "comma-separated outcomes")->required();
  risk_eval->add_option("--probs", re_probs, "comma-separated probabilities (default uniform)");

  CLI::App* check = app.add_subcommand("check", "Jacobian probes and oracle cross-checks");
  double check_gamma = 15.0;
  check->add_option("--gamma", check_gamma, "control weight of example2")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    const int default_j = default_jobs();
    if (risk_eval->parsed()) return cmd_risk_eval(re_kind, re_alpha, re_c, re_values, re_probs);
    if (check->parsed()) return cmd_check(check_gamma);
    for (auto [sc, o, name] : {std::tuple{solve, &solve_o, "solve"}, std::tuple{turnpike, &turnpike_o, "turnpike"},
                               std::tuple{mpc, &mpc_o, "mpc"}, std::tuple{sweep, &sweep_o, "sweep"}}) {
      if (!sc->parsed()) continue;
      json j = o->apply();
      if (jobs < 0) throw ConfigError("--jobs must be a positive integer");
      const int effective_jobs = jobs > 0 ? jobs : default_j;
      RunConfig c = parse_config(j, name);
      c.jobs = effective_jobs;
      const std::string cmd = name;
      if (cmd == "solve") return cmd_solve(c);
      if (cmd == "turnpike") return cmd_turnpike(c);
      if (cmd == "mpc") return cmd_mpc(c);
      return cmd_sweep(c);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "riskmpc: %s\n", e.what());
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "riskmpc: invalid argument: %s\n", e.what());
    return kExitConfig;
  } catch (const ResourceError& e) {
    std::fprintf(stderr, "riskmpc: resource limit: %s\n", e.what());
    return kExitResource;
  } catch (const SolverError& e) {
    std::fprintf(stderr, "riskmpc: solver failure: %s\n", e.what());
    return kExitSolver;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "riskmpc: %s\n", e.what());
    return kExitSolver;
  }
  return kExitConfig;
}
