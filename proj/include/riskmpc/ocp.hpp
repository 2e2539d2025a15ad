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

#ifndef RISKMPC_OCP_HPP
#define RISKMPC_OCP_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "riskmpc/newton.hpp"
#include "riskmpc/optimizer.hpp"
#include "riskmpc/tree.hpp"

namespace riskmpc {

namespace detail {

// argmin_u g(x, u) + E[g(f(x, u, W), 0)] by quasi-Newton from u = 0; zero on failure.
inline std::vector<double> lookahead_control(const Problem& p, const Ensemble& noise, std::span<const double> x) {
  const std::size_t n = p.state_dim, mc = p.control_dim;
  std::vector<double> xn(n), fx(n * n), fu(n * mc), gx(n), gu(mc), gx2(n), gu2(mc), zero_u(mc, 0.0);
  SolveOptions opts;
  opts.tol_grad_inf = 1e-8;
  opts.max_iter = 200;
  ObjectiveFn look = [&](std::span<const double> u, std::span<double> grad) {
    double v = p.g(x, u);
    p.g_gradient(x, u, gx, gu);
    for (std::size_t j = 0; j < mc; ++j) grad[j] = gu[j];
    for (std::size_t b = 0; b < noise.size(); ++b) {
      const double pb = noise.prob(b);
      p.f(x, u, noise.atom(b), xn);
      v += pb * p.g(xn, zero_u);
      p.g_gradient(xn, zero_u, gx2, gu2);
      p.f_jacobian(x, u, noise.atom(b), fx, fu);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < mc; ++j) grad[j] += pb * fu[r * mc + j] * gx2[r];
      }
    }
    return v;
  };
  std::vector<double> u(mc, 0.0);
  try {
    const MinimizeResult r = minimize(look, u, opts);
    if (std::isfinite(r.f)) u = r.x;
  } catch (const SolverError&) {
    // Keep zero control.
  }
  return u;
}

}  // namespace detail

/**
 * Controls from a one-step lookahead: minimize g(x, u) + E[g(f(x, u, W), 0)]
 * node by node along the forward pass.
 */
inline std::vector<double> lookahead_controls(const Problem& p, const ScenarioTree& t, const Ensemble& x0) {
  const std::size_t n = p.state_dim, mc = p.control_dim;
  std::vector<double> controls(t.control_node_count() * mc, 0.0);
  std::vector<double> states(t.node_count() * n);
  for (std::size_t r = 0; r < t.root_count; ++r) {
    for (std::size_t j = 0; j < n; ++j) states[r * n + j] = x0.atom(r)[j];
  }
  for (std::size_t i = 0; i < t.control_node_count(); ++i) {
    const std::span<const double> x(&states[i * n], n);
    const std::vector<double> u = detail::lookahead_control(p, t.noise, x);
    std::copy(u.begin(), u.end(), controls.begin() + i * mc);
    if (t.depth[i] + 1 == t.horizon) continue;
    for (std::size_t b = 0; b < t.branching; ++b) p.f(x, u, t.noise.atom(b), std::span<double>(&states[t.child(i, b) * n], n));
  }
  return controls;
}

/**
 * Receding-horizon policy on the stages from `first_depth` on. At each such
 * node (along the forward pass of `controls`) with more than `lookahead`
 * stages left, the tree OCP of depth `lookahead` is solved from the node
 * state and its first control replaces the node's control. On the last
 * `lookahead` stages each subtree is solved to the horizon, which for
 * separable costs (expectation, fixed theta) is the optimal tail. Earlier
 * stages keep their controls. Solves run risk-neutral first and then, if
 * `cost` is given, continue with it; `cost` must not lift theta. Tail
 * subtrees first try a direct solve from the current controls.
 */
inline void receding_refresh(const Problem& p, const ScenarioTree& t, const Ensemble& x0, std::vector<double>& controls,
                             int first_depth, int lookahead = 3, int newton_max_iter = 50,
                             const OcpCost* cost = nullptr) {
  if (cost && cost->lifted()) throw InvalidArgument("receding_refresh: the tail cost must not lift theta");
  if (lookahead < 1) throw InvalidArgument("receding_refresh: lookahead must be >= 1");
  const std::size_t n = p.state_dim, mc = p.control_dim;
  if (controls.size() != t.control_node_count() * mc) throw InvalidArgument("receding_refresh: control vector size mismatch");
  first_depth = std::max(first_depth, 0);
  if (first_depth >= t.horizon) return;
  const OcpCost neutral = OcpCost::risk(RiskSpec::expectation());
  const OcpCost& target = cost ? *cost : neutral;
  const bool two_phase = !(target.mode == CostMode::kRisk && target.spec.kind == RiskKind::kExpectation);

  // Lookahead start, risk-neutral Newton, then the target cost; keeps the best finite iterate.
  auto staged_solve = [&](const ScenarioTree& ts, const Ensemble& xi) {
    DecisionVector d;
    d.controls = lookahead_controls(p, ts, xi);
    try {
      TreeNewton newton(p, ts, xi, neutral);
      NewtonResult nr = newton.run(d, newton_max_iter, 1e-8);
      if (std::isfinite(nr.objective)) d.controls = std::move(nr.decision.controls);
      if (two_phase) {
        TreeNewton refine(p, ts, xi, target);
        nr = refine.run(d, newton_max_iter, 1e-8);
        if (std::isfinite(nr.objective)) d.controls = std::move(nr.decision.controls);
      }
    } catch (const SolverError&) {
      // Keep the best control found so far.
    }
    return d.controls;
  };

  const int tail_depth = std::max(first_depth, t.horizon - lookahead);
  const ScenarioTree head_tree = build_tree(t.noise, lookahead);
  std::vector<double> states(t.node_count() * n);
  for (std::size_t r = 0; r < t.root_count; ++r) {
    for (std::size_t j = 0; j < n; ++j) states[r * n + j] = x0.atom(r)[j];
  }
  for (std::size_t i = 0; i < t.level_begin(tail_depth); ++i) {
    const std::span<const double> x(&states[i * n], n);
    if (t.depth[i] >= first_depth) {
      const std::vector<double> u = staged_solve(head_tree, Ensemble::point_mass(std::vector<double>(x.begin(), x.end())));
      for (std::size_t j = 0; j < mc; ++j) controls[i * mc + j] = u[j];
    }
    for (std::size_t b = 0; b < t.branching; ++b) {
      p.f(x, std::span<const double>(&controls[i * mc], mc), t.noise.atom(b),
          std::span<double>(&states[t.child(i, b) * n], n));
    }
  }

  // Each tail subtree is solved on its own: with a shared damping parameter
  // one stiff subtree would hold back all the others.
  const ScenarioTree tail = build_tree(t.noise, t.horizon - tail_depth);
  DecisionVector d;
  d.controls.resize(tail.control_node_count() * mc);
  for (std::size_t i = t.level_begin(tail_depth); i < t.level_end(tail_depth); ++i) {
    // Level k of the subtree of i is the contiguous block of t starting at first_k.
    auto copy_subtree = [&](bool into_tree) {
      std::size_t first = i, width = 1;
      for (int k = 0; k < tail.horizon; ++k) {
        for (std::size_t j = 0; j < width; ++j) {
          double* big = &controls[(first + j) * mc];
          double* sm = &d.controls[(tail.offsets[k] + j) * mc];
          if (into_tree) std::copy(sm, sm + mc, big);
          else std::copy(big, big + mc, sm);
        }
        if (k + 1 < tail.horizon) first = t.child(first, 0);
        width *= t.branching;
      }
    };
    const Ensemble xi = Ensemble::point_mass(std::vector<double>(states.begin() + i * n, states.begin() + (i + 1) * n));
    copy_subtree(false);
    bool done = false;
    try {
      TreeNewton direct(p, tail, xi, target);
      NewtonResult nr = direct.run(d, newton_max_iter, 1e-8);
      // Only a warm start: a stalled but finite iterate is good enough.
      if (std::isfinite(nr.objective) && nr.grad_inf <= 1e-4) {
        d.controls = std::move(nr.decision.controls);
        done = true;
      }
    } catch (const SolverError&) {
    }
    if (!done) d.controls = staged_solve(tail, xi);
    copy_subtree(true);
  }
}

/// receding_refresh over the whole tree.
inline std::vector<double> receding_controls(const Problem& p, const ScenarioTree& t, const Ensemble& x0,
                                             int lookahead = 3, int newton_max_iter = 50) {
  std::vector<double> controls(t.control_node_count() * p.control_dim, 0.0);
  receding_refresh(p, t, x0, controls, 0, lookahead, newton_max_iter);
  return controls;
}

/// Lifted theta per stage from the exact risk minimizer of the stage ensemble under `controls`.
inline std::vector<double> initial_thetas(const Problem& p, const ScenarioTree& t, const Ensemble& x0,
                                          const std::vector<double>& controls, const OcpCost& cost) {
  const std::size_t td = cost.theta_dim();
  std::vector<double> thetas(static_cast<std::size_t>(t.horizon) * td, 0.0);
  if (td == 0) return thetas;
  const std::size_t n = p.state_dim, mc = p.control_dim;
  Rollout r;
  r.costs.resize(t.control_node_count());
  {
    std::vector<double> states(t.node_count() * n);
    for (std::size_t q = 0; q < t.root_count; ++q) {
      for (std::size_t j = 0; j < n; ++j) states[q * n + j] = x0.atom(q)[j];
    }
    for (std::size_t i = 0; i < t.control_node_count(); ++i) {
      const std::span<const double> x(&states[i * n], n), u(&controls[i * mc], mc);
      r.costs[i] = p.g(x, u);
      if (t.depth[i] + 1 == t.horizon) continue;
      for (std::size_t b = 0; b < t.branching; ++b) p.f(x, u, t.noise.atom(b), std::span<double>(&states[t.child(i, b) * n], n));
    }
  }
  for (int k = 0; k < t.horizon; ++k) {
    double* th = &thetas[static_cast<std::size_t>(k) * td];
    bool finite = true;
    for (std::size_t i = t.level_begin(k); i < t.level_end(k); ++i) finite = finite && std::isfinite(r.costs[i]);
    if (!finite) {
      th[0] = 1.0;
      continue;
    }
    const Ensemble z = stage_cost_ensemble(t, r, k);
    const RiskValue rv = inner_minimize(cost.spec, z);
    for (std::size_t j = 0; j < td; ++j) th[j] = rv.theta_star[j];
    if (cost.spec.kind == RiskKind::kKlDivergence) {
      // Keep theta_1 off the flat region near zero so the solver can move it.
      const double spread = detail::weighted_max(z) - detail::weighted_min(z);
      th[0] = std::max(th[0], 0.05 * spread);
      if (!(th[0] > 0.0)) th[0] = 1.0;
    }
  }
  return thetas;
}

/**
 * Cold-start decision. Controls come from a receding-horizon policy
 * (receding_controls) refined by the risk-neutral tree Newton solve, a
 * homotopy start for risk-averse costs; lifted theta from the exact risk
 * minimizer of each stage ensemble. newton_max_iter = 0 falls back to the
 * one-step lookahead alone.
 */
inline DecisionVector initial_decision(const Problem& p, const ScenarioTree& t, const Ensemble& x0,
                                       const OcpCost& cost, int newton_max_iter = 100) {
  DecisionVector d;
  d.controls = newton_max_iter > 0 ? receding_controls(p, t, x0) : lookahead_controls(p, t, x0);
  if (newton_max_iter > 0 && !(cost.mode == CostMode::kRisk && cost.spec.kind == RiskKind::kExpectation)) {
    try {
      TreeNewton neutral(p, t, x0, OcpCost::risk(RiskSpec::expectation()));
      NewtonResult nr = neutral.run(d, newton_max_iter, 1e-8);
      if (std::isfinite(nr.objective)) d.controls = std::move(nr.decision.controls);
    } catch (const SolverError&) {
      // Keep the lookahead controls.
    }
  }
  d.thetas = initial_thetas(p, t, x0, d.controls, cost);
  return d;
}

struct OcpDiagnostics {
  int iterations = 0;
  int evaluations = 0;
  double grad_inf = 0.0;
  double objective = 0.0;
  bool converged = false;
  std::string status;
};

struct OcpSolution {
  DecisionVector decision;  // controls unscaled, thetas in native coordinates
  Rollout rollout;
  OcpDiagnostics diagnostics;
};

/**
 * Minimizes the tree objective over controls and lifted theta.
 *
 * A damped tree Newton phase (TreeNewton) runs first; limited-memory BFGS
 * then polishes the result and decides convergence. BFGS works on
 * v_i = sqrt(p_i) u_i (node path probability p_i), which equalizes
 * curvature across depths, and on s with theta_1 = kKlThetaFloor + e^s for the KL measure. The
 * reported gradient norm refers to these variables. Non-convergence returns
 * the best iterate with diagnostics.converged = false.
 */
inline OcpSolution solve_ocp(const Problem& p, const ScenarioTree& t, const Ensemble& x0, const OcpCost& cost,
                             const SolveOptions& opts = {}, const DecisionVector* warm = nullptr) {
  if (!cost.differentiable()) {
    throw InvalidArgument(std::string("solve_ocp: ") + to_string(cost.spec.kind) +
                          " is not differentiable; use avar_softplus");
  }
  opts.validate();
  TreeObjective obj(p, t, x0, cost);
  DecisionVector start = warm ? *warm : initial_decision(p, t, x0, cost, opts.newton_max_iter);
  obj.check_sizes(start);

  int newton_iterations = 0;
  if (opts.newton_max_iter > 0) {
    try {
      TreeNewton newton(p, t, x0, cost);
      NewtonResult nr = newton.run(start, opts.newton_max_iter, 0.1 * opts.tol_grad_inf);
      newton_iterations = nr.iterations;
      if (std::isfinite(nr.objective)) start = std::move(nr.decision);
    } catch (const SolverError&) {
      // Fall back to the quasi-Newton solve from the original start.
    }
  }

  const std::size_t mc = p.control_dim;
  const std::size_t nu = obj.control_size();
  const std::size_t td = cost.theta_dim();
  const bool kl = cost.lifted() && cost.spec.kind == RiskKind::kKlDivergence;
  const std::size_t tv = kl ? 1 : td;  // optimizer variables per stage
  const std::size_t nstage = static_cast<std::size_t>(t.horizon);

  std::vector<double> scale(nu);
  for (std::size_t i = 0; i < t.control_node_count(); ++i) {
    const double s = t.prob[i] > 0.0 ? std::sqrt(t.prob[i]) : 1.0;
    for (std::size_t j = 0; j < mc; ++j) scale[i * mc + j] = s;
  }

  std::vector<double> v0(nu + nstage * tv);
  for (std::size_t i = 0; i < nu; ++i) v0[i] = start.controls[i] * scale[i];
  for (std::size_t k = 0; k < nstage; ++k) {
    for (std::size_t j = 0; j < tv; ++j) {
      const double th = start.thetas[k * td + j];
      if (kl && !(th > 0.0)) throw InvalidArgument("solve_ocp: warm-start KL theta_1 must be > 0");
      v0[nu + k * tv + j] = kl ? kl_theta_to_s(th) : th;
    }
  }

  std::vector<double> u(nu), th(nstage * td), gu(nu), gth(nstage * td);
  auto unpack = [&](std::span<const double> v) {
    for (std::size_t i = 0; i < nu; ++i) u[i] = v[i] / scale[i];
    for (std::size_t k = 0; k < nstage; ++k) {
      if (kl) {
        th[k * td] = kl_s_to_theta(v[nu + k]);
        th[k * td + 1] = 0.0;
      } else {
        for (std::size_t j = 0; j < td; ++j) th[k * td + j] = v[nu + k * tv + j];
      }
    }
  };
  ObjectiveFn fn = [&](std::span<const double> v, std::span<double> g) {
    unpack(v);
    const double f = obj.evaluate(u, th, gu, gth);
    if (!std::isfinite(f)) return f;
    for (std::size_t i = 0; i < nu; ++i) g[i] = gu[i] / scale[i];
    for (std::size_t k = 0; k < nstage; ++k) {
      if (kl) {
        g[nu + k] = gth[k * td] * (th[k * td] - kKlThetaFloor);
      } else {
        for (std::size_t j = 0; j < td; ++j) g[nu + k * tv + j] = gth[k * td + j];
      }
    }
    return f;
  };

  const MinimizeResult r = minimize(fn, std::move(v0), opts);
  unpack(r.x);

  OcpSolution sol;
  sol.decision.controls = u;
  sol.decision.thetas = th;
  sol.rollout = obj.rollout(sol.decision);
  // Report the theta actually used (profiled theta_2 for KL).
  if (td > 0) sol.decision.thetas = sol.rollout.stage_thetas;
  sol.diagnostics.iterations = newton_iterations + r.iterations;
  sol.diagnostics.evaluations = r.evaluations;
  sol.diagnostics.grad_inf = r.grad_inf;
  sol.diagnostics.objective = sol.rollout.objective;
  sol.diagnostics.converged = r.converged();
  sol.diagnostics.status = to_string(r.status);
  return sol;
}

/**
 * Warm start for the tree rooted at child `branch` of the current root: node
 * (k, j) takes the control of old node (k + 1, branch * m^k + j); the last
 * stage repeats the parent control, theta shifts by one stage.
 */
inline DecisionVector time_shift(const ScenarioTree& t, const DecisionVector& d, std::size_t branch,
                                 std::size_t control_dim, std::size_t theta_dim) {
  if (t.root_count != 1) throw InvalidArgument("time_shift: tree must have a single root");
  if (branch >= t.branching) throw InvalidArgument("time_shift: branch out of range");
  const std::size_t m = t.branching;
  DecisionVector out;
  out.controls.resize(d.controls.size());
  std::size_t width = 1;  // m^k
  for (int k = 0; k < t.horizon; ++k) {
    for (std::size_t j = 0; j < width; ++j) {
      std::size_t src;
      if (k + 1 < t.horizon) {
        src = t.offsets[k + 1] + branch * width + j;
      } else {
        src = t.offsets[k] + (branch * width + j) / m;
      }
      const std::size_t dst = t.offsets[k] + j;
      for (std::size_t c = 0; c < control_dim; ++c) out.controls[dst * control_dim + c] = d.controls[src * control_dim + c];
    }
    width *= m;
  }
  out.thetas.resize(d.thetas.size());
  for (int k = 0; k < t.horizon; ++k) {
    const int src = std::min(k + 1, t.horizon - 1);
    for (std::size_t j = 0; j < theta_dim; ++j) out.thetas[k * theta_dim + j] = d.thetas[src * theta_dim + j];
  }
  return out;
}

struct DecompositionReport {
  double mixture_value = 0.0;
  double weighted_sum = 0.0;
  double gap = 0.0;
  bool holds = false;
};

/**
 * Solves from the ensemble x0 (one root per atom) and from each atom alone;
 * for expectation costs the optimal values satisfy V(x0) = sum p_i V(x_i).
 */
inline DecompositionReport value_decomposition_check(const Problem& p, const Ensemble& x0, int N,
                                                     const OcpCost& cost = OcpCost::risk(RiskSpec::expectation()),
                                                     const SolveOptions& opts = {}, double tolerance = 1e-5) {
  DecompositionReport rep;
  const ScenarioTree tm = build_tree(p.noise, N, x0.probs());
  rep.mixture_value = solve_ocp(p, tm, x0, cost, opts).rollout.objective;
  const ScenarioTree t1 = build_tree(p.noise, N);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const auto a = x0.atom(i);
    const Ensemble xi = Ensemble::point_mass(std::vector<double>(a.begin(), a.end()));
    rep.weighted_sum += x0.prob(i) * solve_ocp(p, t1, xi, cost, opts).rollout.objective;
  }
  rep.gap = std::abs(rep.mixture_value - rep.weighted_sum);
  rep.holds = rep.gap <= tolerance;
  return rep;
}

}  // namespace riskmpc

#endif  // RISKMPC_OCP_HPP
