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

// Receding-horizon loops: abstract (distribution level), implementable
// (measured state, risk objective) and risk-averse with a frozen theta.

#ifndef RISKMPC_MPC_HPP
#define RISKMPC_MPC_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "riskmpc/ensemble.hpp"
#include "riskmpc/error.hpp"
#include "riskmpc/ocp.hpp"
#include "riskmpc/risk.hpp"
#include "riskmpc/sysmodel.hpp"
#include "riskmpc/tree.hpp"

namespace riskmpc {

enum class Algorithm {
  kAbstract,              // closed loop on distributions, OCP from the whole ensemble
  kImplementable,         // OCP from the measured state, risk objective
  kRiskAverseFixedTheta,  // OCP from the measured state, E[Psi(g, theta)] with theta frozen
};

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kAbstract: return "abstract";
    case Algorithm::kImplementable: return "implementable";
    case Algorithm::kRiskAverseFixedTheta: return "risk_averse_fixed_theta";
  }
  return "unknown";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "abstract") return Algorithm::kAbstract;
  if (s == "implementable") return Algorithm::kImplementable;
  if (s == "risk_averse_fixed_theta") return Algorithm::kRiskAverseFixedTheta;
  throw InvalidArgument("unknown algorithm '" + s + "' (expected abstract, implementable or risk_averse_fixed_theta)");
}

struct MpcConfig {
  Algorithm algorithm = Algorithm::kImplementable;
  int horizon = 9;
  int steps = 100;  // K
  RiskSpec risk;    // OCP risk
  std::vector<double> theta;  // frozen parameter, fixed-theta algorithm only
  RiskSpec evaluation;        // risk used to report closed-loop stage costs
  int mc_paths = 200;         // M
  std::uint64_t seed = 1;
  bool warm_start = true;
  // Exact propagation: atoms are merged within dedup_tol; more than atom_cap
  // atoms at any step is a resource error.
  double dedup_tol = 1e-9;
  std::size_t atom_cap = 4096;
  int jobs = 1;
  SolveOptions solve;

  OcpCost ocp_cost() const {
    if (algorithm == Algorithm::kRiskAverseFixedTheta) return OcpCost::fixed_theta(risk, theta);
    return OcpCost::risk(risk);
  }

  void validate() const {
    if (horizon < 1) throw InvalidArgument("MpcConfig: horizon must be >= 1");
    if (steps < 1) throw InvalidArgument("MpcConfig: steps must be >= 1");
    if (mc_paths < 1) throw InvalidArgument("MpcConfig: mc_paths must be >= 1");
    if (jobs < 1) throw InvalidArgument("MpcConfig: jobs must be >= 1");
    if (!(dedup_tol >= 0.0)) throw InvalidArgument("MpcConfig: dedup_tol must be >= 0");
    if (atom_cap < 1) throw InvalidArgument("MpcConfig: atom_cap must be >= 1");
    if (algorithm != Algorithm::kRiskAverseFixedTheta && !theta.empty()) {
      throw InvalidArgument("MpcConfig: theta is only used by the fixed-theta algorithm");
    }
    evaluation.validate();
    solve.validate();
    (void)ocp_cost();  // validates risk and theta
  }
};

// Counter-based uniforms: the draw for (path, step) does not depend on how
// many paths or steps are simulated.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Uniform in [0, 1) keyed by (seed, path, step).
inline double counter_uniform(std::uint64_t seed, std::uint64_t path, std::uint64_t step) {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ path) ^ (step * 0xd1b54a32d192ed03ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Atom index whose cumulative probability interval contains u.
inline std::size_t sample_atom(const Ensemble& e, double u) {
  double acc = 0.0;
  for (std::size_t b = 0; b + 1 < e.size(); ++b) {
    acc += e.prob(b);
    if (u < acc) return b;
  }
  return e.size() - 1;
}

/**
 * Influence values of the plug-in risk estimate at each atom: psi(z, theta*)
 * minus the risk for parametric kinds (envelope theorem), z minus the mean
 * for the expectation, and the Rockafellar-Uryasev form at the VaR for
 * exact AV@R.
 */
inline std::vector<double> risk_influence(const RiskSpec& spec, const Ensemble& z, const RiskValue& rv) {
  std::vector<double> inf(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z.value(i);
    switch (spec.kind) {
      case RiskKind::kExpectation: inf[i] = v - rv.value; break;
      case RiskKind::kAvarExact: {
        const double th = rv.theta_star.at(0);
        inf[i] = th + std::max(0.0, v - th) / spec.alpha - rv.value;
        break;
      }
      default: inf[i] = psi(spec, v, rv.theta_star) - rv.value; break;
    }
  }
  return inf;
}

struct FeedbackResult {
  std::vector<double> control;
  OcpSolution solution;
};

/// Root control of the N-stage tree OCP from the point mass at x.
inline FeedbackResult feedback(const Problem& p, const ScenarioTree& t, const OcpCost& cost,
                               std::span<const double> x, const SolveOptions& opts = {},
                               const DecisionVector* warm = nullptr) {
  for (double v : x) {
    if (!std::isfinite(v)) throw InvalidArgument("feedback: state must be finite");
  }
  const Ensemble x0 = Ensemble::point_mass(std::vector<double>(x.begin(), x.end()));
  FeedbackResult r;
  r.solution = solve_ocp(p, t, x0, cost, opts, warm);
  if (!r.solution.diagnostics.converged) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "feedback: OCP solve from x = %.17g did not converge (%s, gradient %.3g)", x[0],
                  r.solution.diagnostics.status.c_str(), r.solution.diagnostics.grad_inf);
    throw SolverError(buf,
                      r.solution.decision.controls, r.solution.diagnostics.objective);
  }
  r.control.assign(r.solution.decision.controls.begin(), r.solution.decision.controls.begin() + p.control_dim);
  return r;
}

inline FeedbackResult feedback(const Problem& p, const OcpCost& cost, int N, std::span<const double> x,
                               const SolveOptions& opts = {}) {
  return feedback(p, build_tree(p.noise, N), cost, x, opts);
}

/**
 * Monte Carlo closed loop.
 *
 * Index layout: states path-major with steps + 1 entries per path, controls,
 * noise and costs path-major with steps entries per path.
 */
struct MpcTrace {
  std::size_t paths = 0, steps = 0;
  std::size_t state_dim = 1, control_dim = 1, noise_dim = 1;
  std::vector<double> states;
  std::vector<double> controls;
  std::vector<double> noise;
  std::vector<double> costs;  // g(x, u)
  // Per step: risk of the empirical cost ensemble under the evaluation spec,
  // its standard error, and the OCP's own stage cost (E[Psi(g, theta)] for
  // the fixed-theta algorithm, the OCP risk otherwise).
  std::vector<double> stage_cost_eval;
  std::vector<double> stage_stderr;
  std::vector<double> stage_cost_theta;
  double cumulative_cost = 0.0;  // J^cl_K
  double averaged_cost = 0.0;    // J^cl_K / K
  double averaged_stderr = 0.0;
  // Solver statistics.
  std::size_t solves = 0;
  long long iterations = 0;
  double max_grad_inf = 0.0;

  double state(std::size_t path, std::size_t step, std::size_t j = 0) const {
    return states[(path * (steps + 1) + step) * state_dim + j];
  }
  double control(std::size_t path, std::size_t step, std::size_t j = 0) const {
    return controls[(path * steps + step) * control_dim + j];
  }
  double noise_at(std::size_t path, std::size_t step, std::size_t j = 0) const {
    return noise[(path * steps + step) * noise_dim + j];
  }
  double cost(std::size_t path, std::size_t step) const { return costs[path * steps + step]; }
};

namespace detail {

// Stages re-solved exactly after the time shift. The shifted controls were
// optimal for one stage less of tail, which the exponential-type costs punish.
inline constexpr int kWarmTail = 3;

// Runs body(i) for i in [0, n) on `jobs` threads; the first exception wins.
template <class Body>
void parallel_for(std::size_t n, int jobs, Body&& body) {
  const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), n);
  if (nt <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (std::size_t w = 0; w < nt; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct PathStats {
  long long iterations = 0;
  double max_grad = 0.0;
};

inline PathStats simulate_path(const Problem& p, const ScenarioTree& t, const OcpCost& cost, const MpcConfig& cfg,
                               std::span<const double> x0, std::size_t path, MpcTrace& tr) {
  const std::size_t n = p.state_dim, mc = p.control_dim, nd = p.noise_dim, K = tr.steps;
  PathStats st;
  std::vector<double> x(x0.begin(), x0.end()), xn(n);
  DecisionVector warm;
  bool have_warm = false;
  // The shifted tail holds final-stage (myopic) controls one stage too early;
  // it is re-solved with the stage cost (lifted theta frozen at its last value).
  OcpCost tail_cost = cost;
  if (cost.lifted()) tail_cost = OcpCost::fixed_theta(cost.spec, std::vector<double>(cost.theta_dim(), 1.0));
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t c = 0; c < n; ++c) tr.states[(path * (K + 1) + j) * n + c] = x[c];
    FeedbackResult fb;
    try {
      fb = feedback(p, t, cost, x, cfg.solve, have_warm ? &warm : nullptr);
    } catch (const SolverError& e) {
      throw SolverError("closed loop path " + std::to_string(path) + " step " + std::to_string(j) + ": " + e.what(),
                        e.best_iterate(), e.best_value());
    }
    st.iterations += fb.solution.diagnostics.iterations;
    st.max_grad = std::max(st.max_grad, fb.solution.diagnostics.grad_inf);
    const std::size_t b = sample_atom(p.noise, counter_uniform(cfg.seed, path, j));
    const auto w = p.noise.atom(b);
    for (std::size_t c = 0; c < mc; ++c) tr.controls[(path * K + j) * mc + c] = fb.control[c];
    for (std::size_t c = 0; c < nd; ++c) tr.noise[(path * K + j) * nd + c] = w[c];
    tr.costs[path * K + j] = p.g(x, fb.control);
    p.f(x, fb.control, w, xn);
    if (cfg.warm_start) {
      warm = time_shift(t, fb.solution.decision, b, mc, cost.theta_dim());
      if (cost.lifted()) {
        const std::size_t td = cost.theta_dim();
        tail_cost.theta.assign(warm.thetas.end() - static_cast<long>(td), warm.thetas.end());
        if (cost.spec.kind == RiskKind::kKlDivergence) tail_cost.theta[0] = std::max(tail_cost.theta[0], 1e-3);
      }
      receding_refresh(p, t, Ensemble::point_mass(xn), warm.controls, std::max(0, t.horizon - kWarmTail), kWarmTail, 50,
                       &tail_cost);
      have_warm = true;
    }
    x = xn;
  }
  for (std::size_t c = 0; c < n; ++c) tr.states[(path * (K + 1) + K) * n + c] = x[c];
  return st;
}

// Stage risks and standard errors from the per-path costs.
inline void aggregate(const MpcConfig& cfg, const OcpCost& cost, MpcTrace& tr) {
  const std::size_t M = tr.paths, K = tr.steps;
  tr.stage_cost_eval.assign(K, 0.0);
  tr.stage_stderr.assign(K, 0.0);
  tr.stage_cost_theta.assign(K, 0.0);
  std::vector<double> path_influence(M, 0.0);
  std::vector<double> z(M);
  const std::vector<double> w(M, 1.0 / static_cast<double>(M));
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t i = 0; i < M; ++i) z[i] = tr.costs[i * K + j];
    const Ensemble e = Ensemble::scalar(z, w);
    const RiskValue rv = evaluate(cfg.evaluation, e);
    tr.stage_cost_eval[j] = rv.value;
    const std::vector<double> inf = risk_influence(cfg.evaluation, e, rv);
    double ss = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      ss += inf[i] * inf[i];
      path_influence[i] += inf[i] / static_cast<double>(K);
    }
    tr.stage_stderr[j] = M > 1 ? std::sqrt(ss / static_cast<double>(M * (M - 1))) : 0.0;
    if (cost.mode == CostMode::kFixedTheta) {
      double s = 0.0;
      for (std::size_t i = 0; i < M; ++i) s += psi(cost.spec, z[i], cost.theta);
      tr.stage_cost_theta[j] = s / static_cast<double>(M);
    } else {
      tr.stage_cost_theta[j] = evaluate(cost.spec, e).value;
    }
  }
  tr.cumulative_cost = 0.0;
  for (double v : tr.stage_cost_eval) tr.cumulative_cost += v;
  tr.averaged_cost = tr.cumulative_cost / static_cast<double>(K);
  double ss = 0.0;
  for (double a : path_influence) ss += a * a;
  tr.averaged_stderr = M > 1 ? std::sqrt(ss / static_cast<double>(M * (M - 1))) : 0.0;
}

}  // namespace detail

/**
 * Simulates mc_paths independent closed loops of the implementable or the
 * fixed-theta algorithm. Noise for (path, step) comes from counter_uniform,
 * so runs with equal seeds share their noise (common random numbers).
 * Results do not depend on cfg.jobs.
 */
inline MpcTrace run_closed_loop(const Problem& p, const MpcConfig& cfg, std::span<const double> x0) {
  cfg.validate();
  p.validate();
  if (cfg.algorithm == Algorithm::kAbstract) {
    throw InvalidArgument("run_closed_loop: the abstract algorithm acts on distributions; use run_exact_propagation");
  }
  if (x0.size() != p.state_dim) throw InvalidArgument("run_closed_loop: x0 has the wrong dimension");
  const OcpCost cost = cfg.ocp_cost();
  const ScenarioTree t = build_tree(p.noise, cfg.horizon);
  MpcTrace tr;
  tr.paths = static_cast<std::size_t>(cfg.mc_paths);
  tr.steps = static_cast<std::size_t>(cfg.steps);
  tr.state_dim = p.state_dim;
  tr.control_dim = p.control_dim;
  tr.noise_dim = p.noise_dim;
  tr.states.assign(tr.paths * (tr.steps + 1) * p.state_dim, 0.0);
  tr.controls.assign(tr.paths * tr.steps * p.control_dim, 0.0);
  tr.noise.assign(tr.paths * tr.steps * p.noise_dim, 0.0);
  tr.costs.assign(tr.paths * tr.steps, 0.0);
  std::vector<detail::PathStats> stats(tr.paths);
  detail::parallel_for(tr.paths, cfg.jobs, [&](std::size_t i) { stats[i] = detail::simulate_path(p, t, cost, cfg, x0, i, tr); });
  tr.solves = tr.paths * tr.steps;
  for (const auto& s : stats) {
    tr.iterations += s.iterations;
    tr.max_grad_inf = std::max(tr.max_grad_inf, s.max_grad);
  }
  detail::aggregate(cfg, cost, tr);
  return tr;
}

/// Closed loop on exact finite distributions.
struct ExactClosedLoop {
  std::vector<Ensemble> states;    // steps + 1 marginals
  std::vector<Ensemble> controls;  // steps
  std::vector<Ensemble> costs;     // g(X(j), U(j))
  std::vector<double> stage_cost_eval;
  std::vector<double> stage_cost_theta;
  double cumulative_cost = 0.0;
  double averaged_cost = 0.0;
  std::size_t solves = 0;
  std::size_t max_atoms = 0;
};

/**
 * Propagates the closed-loop distribution exactly. The abstract algorithm
 * solves one OCP per step from the whole state ensemble (one tree root per
 * atom) and applies each root's control to its atom; the measured-state
 * algorithms solve one OCP per atom. Atoms are merged within cfg.dedup_tol
 * before every step. Throws ResourceError when more than cfg.atom_cap
 * atoms would be needed.
 */
inline ExactClosedLoop run_exact_propagation(const Problem& p, const MpcConfig& cfg, std::span<const double> x0) {
  cfg.validate();
  p.validate();
  if (x0.size() != p.state_dim) throw InvalidArgument("run_exact_propagation: x0 has the wrong dimension");
  const OcpCost cost = cfg.ocp_cost();
  const std::size_t n = p.state_dim, mc = p.control_dim, m = p.noise.size();
  const ScenarioTree single = build_tree(p.noise, cfg.horizon);
  ExactClosedLoop out;
  Ensemble X = Ensemble::point_mass(std::vector<double>(x0.begin(), x0.end()));
  for (int j = 0; j < cfg.steps; ++j) {
    X = dedup(X, cfg.dedup_tol);
    out.states.push_back(X);
    const std::size_t na = X.size();
    out.max_atoms = std::max(out.max_atoms, na);
    if (na * m > cfg.atom_cap) {
      throw ResourceError("run_exact_propagation: step " + std::to_string(j + 1) + " needs " + std::to_string(na * m) +
                          " atoms, above the cap of " + std::to_string(cfg.atom_cap) + "; use the Monte Carlo closed loop");
    }
    std::vector<double> u(na * mc);
    if (cfg.algorithm == Algorithm::kAbstract) {
      const ScenarioTree t = build_tree(p.noise, cfg.horizon, X.probs());
      const OcpSolution sol = solve_ocp(p, t, X, cost, cfg.solve);
      if (!sol.diagnostics.converged) {
        throw SolverError("run_exact_propagation: step " + std::to_string(j) + " did not converge (" +
                              sol.diagnostics.status + ")",
                          sol.decision.controls, sol.diagnostics.objective);
      }
      std::copy(sol.decision.controls.begin(), sol.decision.controls.begin() + na * mc, u.begin());
      ++out.solves;
    } else {
      detail::parallel_for(na, cfg.jobs, [&](std::size_t a) {
        FeedbackResult fb;
        try {
          fb = feedback(p, single, cost, X.atom(a), cfg.solve);
        } catch (const SolverError& e) {
          throw SolverError("run_exact_propagation: step " + std::to_string(j) + " atom " + std::to_string(a) + ": " +
                                e.what(),
                            e.best_iterate(), e.best_value());
        }
        std::copy(fb.control.begin(), fb.control.end(), u.begin() + a * mc);
      });
      out.solves += na;
    }
    std::vector<double> g(na), next(na * m * n), probs(na * m);
    for (std::size_t a = 0; a < na; ++a) {
      const std::span<const double> ua(&u[a * mc], mc);
      g[a] = p.g(X.atom(a), ua);
      for (std::size_t b = 0; b < m; ++b) {
        p.f(X.atom(a), ua, p.noise.atom(b), std::span<double>(&next[(a * m + b) * n], n));
        probs[a * m + b] = X.prob(a) * p.noise.prob(b);
      }
    }
    out.controls.emplace_back(u, X.probs(), mc);
    const Ensemble z = Ensemble::scalar(g, X.probs());
    out.costs.push_back(z);
    out.stage_cost_eval.push_back(evaluate(cfg.evaluation, z).value);
    if (cost.mode == CostMode::kFixedTheta) {
      out.stage_cost_theta.push_back(expected_psi(cost.spec, z, cost.theta));
    } else {
      out.stage_cost_theta.push_back(evaluate(cost.spec, z).value);
    }
    X = Ensemble(std::move(next), std::move(probs), n);
  }
  out.states.push_back(dedup(X, cfg.dedup_tol));
  for (double v : out.stage_cost_eval) out.cumulative_cost += v;
  out.averaged_cost = out.cumulative_cost / static_cast<double>(cfg.steps);
  return out;
}

struct SweepCell {
  int horizon = 9;
  std::string theta_label;    // e.g. "theta_s", "theta_s+1.5"
  std::vector<double> theta;  // frozen parameter for this cell
};

struct SweepRow {
  SweepCell cell;
  double averaged_cost = 0.0;
  double std_error = 0.0;
  double stationary_cost = 0.0;
  std::size_t solves = 0;
  long long iterations = 0;
  double max_grad_inf = 0.0;
};

/**
 * Fixed-theta closed loops for each cell. Every cell reuses base.seed, so
 * cells see identical noise (common random numbers) and duplicate cells
 * give identical rows.
 */
inline std::vector<SweepRow> run_sweep_cells(const Problem& p, const MpcConfig& base, std::span<const double> x0,
                                             const std::vector<SweepCell>& cells, double stationary_cost) {
  std::vector<SweepRow> rows;
  rows.reserve(cells.size());
  for (const SweepCell& c : cells) {
    MpcConfig cfg = base;
    cfg.algorithm = Algorithm::kRiskAverseFixedTheta;
    cfg.horizon = c.horizon;
    cfg.theta = c.theta;
    const MpcTrace tr = run_closed_loop(p, cfg, x0);
    SweepRow r;
    r.cell = c;
    r.averaged_cost = tr.averaged_cost;
    r.std_error = tr.averaged_stderr;
    r.stationary_cost = stationary_cost;
    r.solves = tr.solves;
    r.iterations = tr.iterations;
    r.max_grad_inf = tr.max_grad_inf;
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Full grid horizons x labeled thetas (row-major in horizons).
inline std::vector<SweepRow> performance_sweep(const Problem& p, const MpcConfig& base, std::span<const double> x0,
                                               const std::vector<int>& horizons,
                                               const std::vector<std::pair<std::string, std::vector<double>>>& thetas,
                                               double stationary_cost) {
  std::vector<SweepCell> cells;
  for (int N : horizons) {
    for (const auto& [label, th] : thetas) cells.push_back(SweepCell{N, label, th});
  }
  return run_sweep_cells(p, base, x0, cells, stationary_cost);
}

}  // namespace riskmpc

#endif  // RISKMPC_MPC_HPP
