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

#ifndef RISKMPC_TURNPIKE_HPP
#define RISKMPC_TURNPIKE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "riskmpc/ensemble.hpp"
#include "riskmpc/error.hpp"
#include "riskmpc/mpc.hpp"
#include "riskmpc/ocp.hpp"
#include "riskmpc/risk.hpp"
#include "riskmpc/sysmodel.hpp"
#include "riskmpc/tree.hpp"

namespace riskmpc {

/**
 * Stationary pair read off an optimal tree solution at one stage.
 *
 * Near the turnpike the optimal marginals barely move, so the mid-horizon
 * stage of a long solve stands in for the stationary pair and its theta.
 */
struct StationaryEstimate {
  Ensemble x_dist = Ensemble::point_mass(0.0);
  Ensemble u_dist = Ensemble::point_mass(0.0);
  double stage_cost = 0.0;       // under the evaluation spec
  std::vector<double> theta_s;   // stage theta* (spec.theta_dim() entries)
  int source_horizon = 0;
  int stage_index = 0;
};

/// Per-stage theta* of a solution, horizon x theta_dim, row-major.
inline std::vector<double> stage_thetas(const OcpSolution& sol, const OcpCost& cost) {
  if (cost.lifted()) return sol.decision.thetas;
  return sol.rollout.stage_thetas;
}

/// Stationary estimate from stage k of an existing solution.
inline StationaryEstimate stationary_at(const Problem& p, const ScenarioTree& t, const OcpSolution& sol,
                                        const RiskSpec& spec, const RiskSpec& evaluation, int k,
                                        double dedup_tol = 1e-9) {
  if (k < 0 || k >= t.horizon) throw InvalidArgument("stationary_at: stage out of range");
  StationaryEstimate s;
  s.x_dist = dedup(state_marginal(t, sol.rollout, p.state_dim, k), dedup_tol);
  s.u_dist = dedup(control_marginal(t, sol.decision, p.control_dim, k), dedup_tol);
  s.stage_cost = evaluate(evaluation, stage_cost_ensemble(t, sol.rollout, k)).value;
  const std::size_t td = static_cast<std::size_t>(spec.theta_dim());
  const std::vector<double> th = stage_thetas(sol, OcpCost::risk(spec));
  if (th.size() >= (static_cast<std::size_t>(k) + 1) * td) {
    s.theta_s.assign(th.begin() + static_cast<long>(k * td), th.begin() + static_cast<long>((k + 1) * td));
  }
  s.source_horizon = t.horizon;
  s.stage_index = k;
  if (!std::isfinite(s.stage_cost)) throw SolverError("stationary_at: stage cost is not finite", {}, s.stage_cost);
  return s;
}

/**
 * Solves the N_long tree OCP from x0 under the risk objective and reads the
 * stationary estimate at k* = floor(N_long / 2).
 */
inline StationaryEstimate estimate_stationary(const Problem& p, const RiskSpec& spec, int n_long, const Ensemble& x0,
                                              const RiskSpec& evaluation, const SolveOptions& opts = {},
                                              double dedup_tol = 1e-9) {
  if (n_long < 5) throw InvalidArgument("estimate_stationary: N_long must be >= 5");
  const ScenarioTree t = build_tree(p.noise, n_long, x0.probs());
  const OcpCost cost = OcpCost::risk(spec);
  const OcpSolution sol = solve_ocp(p, t, x0, cost, opts);
  if (!sol.diagnostics.converged) {
    throw SolverError("estimate_stationary: OCP did not converge (" + sol.diagnostics.status + ")",
                      sol.decision.controls, sol.diagnostics.objective);
  }
  return stationary_at(p, t, sol, spec, evaluation, n_long / 2, dedup_tol);
}

inline StationaryEstimate estimate_stationary(const Problem& p, const RiskSpec& spec, int n_long, const Ensemble& x0) {
  return estimate_stationary(p, spec, n_long, x0, spec);
}

/// One stage of one horizon. Stage N has no control, theta or stage cost (NaN).
struct TurnpikeRow {
  int horizon = 0;
  int stage = 0;
  double d_wasserstein = 0.0;
  double d_moment = 0.0;
  double envelope_width = 0.0;  // max - min of the stage state atoms (first component)
  double state_mean = 0.0;
  std::vector<double> theta;
  double stage_cost = std::numeric_limits<double>::quiet_NaN();
};

struct TurnpikeCurve {
  int horizon = 0;
  std::vector<TurnpikeRow> rows;  // stages 0..horizon
  OcpDiagnostics diagnostics;
  OcpSolution solution;  // on build_tree(p.noise, horizon, x0.probs())
};

/**
 * For each N, solves the OCP from x0 and measures every stage marginal
 * against the reference: order-r Wasserstein and moment distances, the
 * envelope width, per-stage theta* and the evaluated stage cost. Horizons
 * run on `jobs` threads.
 */
inline std::vector<TurnpikeCurve> turnpike_curves(const Problem& p, const RiskSpec& spec, const std::vector<int>& horizons,
                                                  const Ensemble& x0, const StationaryEstimate& ref, double r = 2.0,
                                                  const RiskSpec* evaluation = nullptr, const SolveOptions& opts = {},
                                                  int jobs = 1) {
  if (p.state_dim != 1) throw InvalidArgument("turnpike_curves: distances need a scalar state");
  if (ref.x_dist.dim() != 1) throw InvalidArgument("turnpike_curves: reference must be a scalar state marginal");
  const RiskSpec& eval = evaluation ? *evaluation : spec;
  const OcpCost cost = OcpCost::risk(spec);
  const std::size_t td = static_cast<std::size_t>(spec.theta_dim());
  std::vector<TurnpikeCurve> out(horizons.size());
  detail::parallel_for(horizons.size(), jobs, [&](std::size_t h) {
    const int N = horizons[h];
    const ScenarioTree t = build_tree(p.noise, N, x0.probs());
    const OcpSolution sol = solve_ocp(p, t, x0, cost, opts);
    if (!sol.diagnostics.converged) {
      throw SolverError("turnpike_curves: OCP did not converge for N=" + std::to_string(N) + " (" +
                            sol.diagnostics.status + ")",
                        sol.decision.controls, sol.diagnostics.objective);
    }
    const std::vector<double> th = stage_thetas(sol, cost);
    TurnpikeCurve& c = out[h];
    c.horizon = N;
    c.diagnostics = sol.diagnostics;
    c.solution = sol;
    for (int k = 0; k <= N; ++k) {
      const Ensemble xk = state_marginal(t, sol.rollout, 1, k);
      TurnpikeRow row;
      row.horizon = N;
      row.stage = k;
      row.d_wasserstein = wasserstein_1d(xk, ref.x_dist, r);
      row.d_moment = moment_distance(xk, ref.x_dist, r);
      const auto [lo, hi] = std::minmax_element(xk.atoms().begin(), xk.atoms().end());
      row.envelope_width = *hi - *lo;
      row.state_mean = scalar_mean(xk);
      if (k < N) {
        if (th.size() >= static_cast<std::size_t>(k + 1) * td) {
          row.theta.assign(th.begin() + static_cast<long>(k * td), th.begin() + static_cast<long>((k + 1) * td));
        }
        row.stage_cost = evaluate(eval, stage_cost_ensemble(t, sol.rollout, k)).value;
      }
      c.rows.push_back(std::move(row));
    }
  });
  return out;
}

/// counts[j] = #{k : distances[k] > thresholds[j]}.
inline std::vector<std::size_t> exceedance_profile(const std::vector<double>& distances,
                                                   const std::vector<double>& thresholds) {
  std::vector<std::size_t> counts;
  counts.reserve(thresholds.size());
  for (double eps : thresholds) {
    counts.push_back(static_cast<std::size_t>(
        std::count_if(distances.begin(), distances.end(), [eps](double d) { return d > eps; })));
  }
  return counts;
}

}  // namespace riskmpc

#endif  // RISKMPC_TURNPIKE_HPP
