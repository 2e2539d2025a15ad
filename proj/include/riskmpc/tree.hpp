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

#ifndef RISKMPC_TREE_HPP
#define RISKMPC_TREE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/ensemble.hpp"
#include "riskmpc/error.hpp"
#include "riskmpc/optimizer.hpp"
#include "riskmpc/risk.hpp"
#include "riskmpc/sysmodel.hpp"

namespace riskmpc {

inline constexpr std::size_t kDefaultNodeCap = 200000;

/**
 * Complete m-ary scenario tree in breadth-first layout.
 *
 * Depth k occupies [offsets[k], offsets[k+1]). Depth 0 holds one node per
 * atom of the initial ensemble; children of node i at depth k are
 * offsets[k+1] + (i - offsets[k]) * m + b for branch b. Controls live on
 * nodes of depth < horizon, so node i's control has index i.
 */
struct ScenarioTree {
  int horizon = 0;
  std::size_t branching = 0;
  std::size_t root_count = 0;
  Ensemble noise = Ensemble::point_mass(0.0);
  std::vector<std::size_t> parent;  // npos for roots
  std::vector<int> depth;
  std::vector<std::size_t> branch;  // noise atom index leading to the node (0 for roots)
  std::vector<double> prob;         // path probability
  std::vector<std::size_t> offsets;

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::size_t node_count() const noexcept { return prob.size(); }
  std::size_t control_node_count() const noexcept { return offsets[horizon]; }
  std::size_t level_begin(int k) const { return offsets[k]; }
  std::size_t level_end(int k) const { return offsets[k + 1]; }
  std::size_t level_size(int k) const { return offsets[k + 1] - offsets[k]; }
  std::size_t child(std::size_t i, std::size_t b) const {
    const int k = depth[i];
    return offsets[k + 1] + (i - offsets[k]) * branching + b;
  }
};

/// Builds the tree for i.i.d. noise over N stages. root_probs weights the
/// initial atoms (a single 1.0 for a point-mass start).
inline ScenarioTree build_tree(const Ensemble& noise, int N, const std::vector<double>& root_probs = {1.0},
                               std::size_t node_cap = kDefaultNodeCap) {
  if (N < 1) throw InvalidArgument("build_tree: horizon must be >= 1");
  if (root_probs.empty()) throw InvalidArgument("build_tree: at least one root required");
  const std::size_t m = noise.size();
  // Count first so oversize requests fail before allocating.
  std::size_t total = 0, level = root_probs.size();
  for (int k = 0; k <= N; ++k) {
    total += level;
    if (total > node_cap) {
      throw ResourceError("build_tree: " + std::to_string(root_probs.size()) + " root(s) x branching " +
                          std::to_string(m) + " over horizon " + std::to_string(N) + " exceeds the node cap of " +
                          std::to_string(node_cap) + "; reduce the horizon or raise the cap");
    }
    if (k < N) level *= m;
  }

  ScenarioTree t;
  t.horizon = N;
  t.branching = m;
  t.root_count = root_probs.size();
  t.noise = noise;
  t.parent.reserve(total);
  t.depth.reserve(total);
  t.branch.reserve(total);
  t.prob.reserve(total);
  t.offsets.push_back(0);
  for (double p : root_probs) {
    t.parent.push_back(ScenarioTree::npos);
    t.depth.push_back(0);
    t.branch.push_back(0);
    t.prob.push_back(p);
  }
  t.offsets.push_back(t.prob.size());
  for (int k = 0; k < N; ++k) {
    for (std::size_t i = t.offsets[k]; i < t.offsets[k + 1]; ++i) {
      for (std::size_t b = 0; b < m; ++b) {
        t.parent.push_back(i);
        t.depth.push_back(k + 1);
        t.branch.push_back(b);
        t.prob.push_back(t.prob[i] * noise.prob(b));
      }
    }
    t.offsets.push_back(t.prob.size());
  }
  return t;
}

/**
 * The OCP solvers parametrize the lifted KL theta_1 as kKlThetaFloor + e^s.
 * When the stage infimum sits at theta_1 -> 0 (the worst case is a point
 * mass), the solved stage value exceeds the exact risk by at most
 * kKlThetaFloor * |c - log(1 / p_max)|.
 */
inline constexpr double kKlThetaFloor = 1e-7;

/// Solver coordinate s of a KL theta_1 (inverse of kKlThetaFloor + e^s).
inline double kl_theta_to_s(double theta1) {
  return std::log(std::max(theta1 - kKlThetaFloor, 1e-3 * kKlThetaFloor));
}

inline double kl_s_to_theta(double s) { return kKlThetaFloor + std::exp(s); }

enum class CostMode {
  kRisk,        // stage cost rho(g); parametric kinds lift theta into the decision
  kFixedTheta,  // stage cost E[Psi(g, theta)] with theta frozen
};

/// Stage-cost model of the tree OCP.
struct OcpCost {
  RiskSpec spec;
  CostMode mode = CostMode::kRisk;
  std::vector<double> theta;  // fixed parameter (kFixedTheta only), native coordinates

  static OcpCost risk(RiskSpec s) {
    OcpCost c;
    c.spec = std::move(s);
    c.validate();
    return c;
  }
  static OcpCost fixed_theta(RiskSpec s, std::vector<double> theta) {
    OcpCost c;
    c.spec = std::move(s);
    c.mode = CostMode::kFixedTheta;
    c.theta = std::move(theta);
    c.validate();
    return c;
  }

  bool lifted() const noexcept { return mode == CostMode::kRisk && spec.is_parametric(); }
  /// theta entries per stage carried by a DecisionVector.
  std::size_t theta_dim() const noexcept { return lifted() ? static_cast<std::size_t>(spec.theta_dim()) : 0; }
  bool differentiable() const noexcept { return spec.is_smooth(); }

  void validate() const {
    spec.validate();
    if (mode == CostMode::kFixedTheta) {
      if (!spec.is_parametric()) {
        throw InvalidArgument(std::string("OcpCost: fixed theta needs a parametric risk, got ") + to_string(spec.kind));
      }
      if (theta.size() != static_cast<std::size_t>(spec.theta_dim())) {
        throw InvalidArgument("OcpCost: fixed theta has length " + std::to_string(theta.size()) + ", expected " +
                              std::to_string(spec.theta_dim()));
      }
      for (double v : theta) {
        if (!std::isfinite(v)) throw InvalidArgument("OcpCost: fixed theta must be finite");
      }
      if (spec.kind == RiskKind::kKlDivergence && !(theta[0] > 0.0)) {
        throw InvalidArgument("OcpCost: KL fixed theta requires theta_1 > 0");
      }
    } else if (!theta.empty()) {
      throw InvalidArgument("OcpCost: theta is only meaningful with a fixed-theta cost");
    }
  }
};

/// Per-node controls (node-major, control_dim each) and per-stage theta.
struct DecisionVector {
  std::vector<double> controls;
  std::vector<double> thetas;  // horizon x cost.theta_dim()
};

/**
 * Forward pass result.
 *
 * stage_thetas holds the parameter actually used per stage: the lifted value
 * (with the KL theta_2 profiled), the fixed value, or the exact evaluator's
 * minimizer for non-lifted kinds (empty for the expectation).
 */
struct Rollout {
  std::vector<double> states;  // node-major, state_dim each
  std::vector<double> costs;   // g at each control node
  std::vector<double> stage_values;
  std::vector<double> stage_thetas;  // horizon x spec.theta_dim()
  double objective = 0.0;
};

/// Ensemble of stage costs over the depth-k nodes (aligned with the nodes).
inline Ensemble stage_cost_ensemble(const ScenarioTree& t, const Rollout& r, int k) {
  if (k < 0 || k >= t.horizon) throw InvalidArgument("stage_cost_ensemble: stage out of range");
  const std::size_t b = t.level_begin(k), e = t.level_end(k);
  return Ensemble::scalar(std::vector<double>(r.costs.begin() + b, r.costs.begin() + e),
                          std::vector<double>(t.prob.begin() + b, t.prob.begin() + e));
}

/// State marginal at depth k (0..horizon).
inline Ensemble state_marginal(const ScenarioTree& t, const Rollout& r, std::size_t state_dim, int k) {
  if (k < 0 || k > t.horizon) throw InvalidArgument("state_marginal: stage out of range");
  const std::size_t b = t.level_begin(k), e = t.level_end(k);
  return Ensemble(std::vector<double>(r.states.begin() + b * state_dim, r.states.begin() + e * state_dim),
                  std::vector<double>(t.prob.begin() + b, t.prob.begin() + e), state_dim);
}

/// Control marginal at depth k (0..horizon-1).
inline Ensemble control_marginal(const ScenarioTree& t, const DecisionVector& d, std::size_t control_dim, int k) {
  if (k < 0 || k >= t.horizon) throw InvalidArgument("control_marginal: stage out of range");
  const std::size_t b = t.level_begin(k), e = t.level_end(k);
  return Ensemble(std::vector<double>(d.controls.begin() + b * control_dim, d.controls.begin() + e * control_dim),
                  std::vector<double>(t.prob.begin() + b, t.prob.begin() + e), control_dim);
}

/**
 * Objective engine for one (problem, tree, initial ensemble, cost) tuple.
 *
 * Holds scratch buffers so repeated evaluations do not allocate; one
 * instance must not be shared across threads.
 *
 * Lifted KL stages use theta_1 from the decision and profile theta_2 out
 * analytically: min over theta_2 gives t (c + log E[exp(g / t)]). The
 * decision's theta_2 entries are ignored and their gradient is zero.
 * Single-node stages in lifted mode use the exact value g + rho(0)
 * (translativity); their theta entries carry zero gradient.
 */
class TreeObjective {
 public:
  TreeObjective(const Problem& p, const ScenarioTree& t, const Ensemble& x0, OcpCost cost)
      : p_(p), t_(t), x0_(x0), cost_(std::move(cost)) {
    p_.validate();
    cost_.validate();
    if (x0_.dim() != p_.state_dim) throw InvalidArgument("TreeObjective: initial ensemble dimension mismatch");
    if (x0_.size() != t_.root_count) throw InvalidArgument("TreeObjective: tree roots do not match initial atoms");
    if (t_.noise.dim() != p_.noise_dim) throw InvalidArgument("TreeObjective: tree noise dimension mismatch");
    const std::size_t n = p_.state_dim;
    states_.resize(t_.node_count() * n);
    lambda_.resize(t_.node_count() * n);
    costs_.resize(t_.control_node_count());
    weights_.resize(t_.control_node_count());
    fx_.resize(n * n);
    fu_.resize(n * p_.control_dim);
    gx_.resize(n);
    gu_.resize(p_.control_dim);
    if (cost_.lifted()) {
      const RiskValue r0 = inner_minimize(cost_.spec, Ensemble::point_mass(0.0));
      rho0_ = r0.value;
      theta0_ = r0.theta_star;
    }
  }

  const Problem& problem() const noexcept { return p_; }
  const ScenarioTree& tree() const noexcept { return t_; }
  const OcpCost& cost() const noexcept { return cost_; }
  std::size_t control_size() const noexcept { return t_.control_node_count() * p_.control_dim; }
  std::size_t theta_size() const noexcept { return static_cast<std::size_t>(t_.horizon) * cost_.theta_dim(); }

  void check_sizes(const DecisionVector& d) const {
    if (d.controls.size() != control_size()) {
      throw InvalidArgument("decision has " + std::to_string(d.controls.size()) + " control entries, expected " +
                            std::to_string(control_size()));
    }
    if (d.thetas.size() != theta_size()) {
      throw InvalidArgument("decision has " + std::to_string(d.thetas.size()) + " theta entries, expected " +
                            std::to_string(theta_size()));
    }
  }

  /**
   * Objective and (optionally) gradient. Returns +inf instead of throwing
   * when a state or cost is not finite, so line searches can back off.
   * grad_controls / grad_thetas may be empty to skip the backward pass.
   */
  double evaluate(std::span<const double> controls, std::span<const double> thetas, std::span<double> grad_controls,
                  std::span<double> grad_thetas, std::span<double> stage_values = {},
                  std::span<double> used_thetas = {}) {
    const bool want_grad = !grad_controls.empty();
    if (want_grad && !cost_.differentiable()) {
      throw InvalidArgument(std::string("objective_and_gradient: ") + to_string(cost_.spec.kind) +
                            " is not differentiable; use avar_softplus");
    }
    bad_node_ = ScenarioTree::npos;
    if (!forward(controls)) return std::numeric_limits<double>::infinity();

    const std::size_t td = cost_.theta_dim();
    const std::size_t sd = static_cast<std::size_t>(cost_.spec.theta_dim());
    double objective = 0.0;
    double dtheta[2] = {0.0, 0.0};
    double used[2] = {0.0, 0.0};
    for (int k = 0; k < t_.horizon; ++k) {
      std::span<const double> th;
      if (td > 0) th = thetas.subspan(static_cast<std::size_t>(k) * td, td);
      const double v = stage(k, th, dtheta, used);
      if (!std::isfinite(v)) {
        bad_node_ = t_.level_begin(k);
        return std::numeric_limits<double>::infinity();
      }
      objective += v;
      if (!stage_values.empty()) stage_values[k] = v;
      if (!used_thetas.empty()) {
        for (std::size_t j = 0; j < sd; ++j) used_thetas[k * sd + j] = used[j];
      }
      if (want_grad && td > 0) {
        for (std::size_t j = 0; j < td; ++j) grad_thetas[k * td + j] = dtheta[j];
      }
    }
    if (want_grad) backward(controls, grad_controls);
    return objective;
  }

  /// Forward pass with full reporting; throws naming the first bad node.
  Rollout rollout(const DecisionVector& d) {
    check_sizes(d);
    Rollout r;
    const std::size_t sd = static_cast<std::size_t>(cost_.spec.theta_dim());
    r.stage_values.resize(t_.horizon);
    r.stage_thetas.assign(static_cast<std::size_t>(t_.horizon) * sd, 0.0);
    r.objective = evaluate(d.controls, d.thetas, {}, {}, r.stage_values, r.stage_thetas);
    if (!std::isfinite(r.objective)) {
      const std::size_t node = bad_node_;
      throw SolverError("rollout: non-finite state or cost at node " + std::to_string(node) + " (depth " +
                            std::to_string(node < t_.node_count() ? t_.depth[node] : -1) + ")",
                        d.controls, r.objective);
    }
    r.states = states_;
    r.costs = costs_;
    if (cost_.mode == CostMode::kRisk && cost_.spec.kind == RiskKind::kAvarExact) {
      r.stage_thetas.assign(t_.horizon, 0.0);
      for (int k = 0; k < t_.horizon; ++k) {
        r.stage_thetas[k] = evaluate_spec(stage_cost_ensemble(t_, r, k)).theta_star.at(0);
      }
    }
    return r;
  }

 private:
  RiskValue evaluate_spec(const Ensemble& z) const { return riskmpc::evaluate(cost_.spec, z); }

  bool forward(std::span<const double> controls) {
    const std::size_t n = p_.state_dim, mc = p_.control_dim;
    for (std::size_t r = 0; r < t_.root_count; ++r) {
      for (std::size_t j = 0; j < n; ++j) states_[r * n + j] = x0_.atom(r)[j];
    }
    for (std::size_t i = 0; i < t_.control_node_count(); ++i) {
      const std::span<const double> x(&states_[i * n], n), u(&controls[i * mc], mc);
      const double gi = p_.g(x, u);
      if (!std::isfinite(gi)) {
        bad_node_ = i;
        return false;
      }
      costs_[i] = gi;
      for (std::size_t b = 0; b < t_.branching; ++b) {
        const std::size_t c = t_.child(i, b);
        std::span<double> xn(&states_[c * n], n);
        p_.f(x, u, t_.noise.atom(b), xn);
        for (double v : xn) {
          if (!std::isfinite(v)) {
            bad_node_ = c;
            return false;
          }
        }
      }
    }
    return true;
  }

  // Stage value for depth k; fills weights_ (d value / d g_i) and dtheta.
  double stage(int k, std::span<const double> th, double* dtheta, double* used) {
    const std::size_t b = t_.level_begin(k), e = t_.level_end(k);
    const RiskSpec& spec = cost_.spec;
    dtheta[0] = dtheta[1] = 0.0;

    if (spec.kind == RiskKind::kExpectation) {
      double v = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        v += t_.prob[i] * costs_[i];
        weights_[i] = t_.prob[i];
      }
      return v;
    }
    if (spec.kind == RiskKind::kAvarExact) {
      return evaluate_spec(Ensemble::scalar(std::vector<double>(costs_.begin() + b, costs_.begin() + e),
                                            std::vector<double>(t_.prob.begin() + b, t_.prob.begin() + e)))
          .value;
    }

    if (cost_.mode == CostMode::kFixedTheta) {
      double v = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const PsiEval pe = psi_eval(spec, costs_[i], cost_.theta);
        v += t_.prob[i] * pe.value;
        weights_[i] = t_.prob[i] * pe.dz;
      }
      used[0] = cost_.theta[0];
      if (cost_.theta.size() > 1) used[1] = cost_.theta[1];
      return v;
    }

    // Lifted parametric stage.
    if (e - b == 1) {
      weights_[b] = 1.0;
      used[0] = theta0_[0];
      if (spec.kind == RiskKind::kKlDivergence) {
        used[1] = theta0_[1] + costs_[b];
      } else {
        used[0] += costs_[b];
      }
      return costs_[b] + rho0_;
    }
    if (spec.kind == RiskKind::kKlDivergence) {
      const double t = th[0];
      if (!(t > 0.0) || !std::isfinite(t)) return std::numeric_limits<double>::infinity();
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t i = b; i < e; ++i) {
        if (t_.prob[i] > 0.0) zmax = std::max(zmax, costs_[i]);
      }
      double s = 0.0, sz = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const double q = t_.prob[i] * std::exp((costs_[i] - zmax) / t);
        weights_[i] = q;
        s += q;
        sz += q * costs_[i];
      }
      const double log_mgf = zmax / t + std::log(s);  // log E[exp(g / t)]
      for (std::size_t i = b; i < e; ++i) weights_[i] /= s;
      // d/dt [t (c + L(t))] = c + L - E_q[g] / t
      dtheta[0] = spec.c + std::log(s) + (zmax - sz / s) / t;
      used[0] = t;
      used[1] = t * log_mgf;
      return t * spec.c + zmax + t * std::log(s);
    }
    double v = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      const PsiEval pe = psi_eval(spec, costs_[i], th);
      v += t_.prob[i] * pe.value;
      weights_[i] = t_.prob[i] * pe.dz;
      dtheta[0] += t_.prob[i] * pe.dtheta[0];
    }
    used[0] = th[0];
    return v;
  }

  void backward(std::span<const double> controls, std::span<double> grad_u) {
    const std::size_t n = p_.state_dim, mc = p_.control_dim;
    std::fill(lambda_.begin(), lambda_.end(), 0.0);
    for (std::size_t i = t_.control_node_count(); i-- > 0;) {
      const std::span<const double> x(&states_[i * n], n), u(&controls[i * mc], mc);
      p_.g_gradient(x, u, gx_, gu_);
      double* lam = &lambda_[i * n];
      double* gu = &grad_u[i * mc];
      for (std::size_t j = 0; j < n; ++j) lam[j] = weights_[i] * gx_[j];
      for (std::size_t j = 0; j < mc; ++j) gu[j] = weights_[i] * gu_[j];
      if (t_.depth[i] + 1 == t_.horizon) continue;  // leaf states carry no cost
      for (std::size_t b = 0; b < t_.branching; ++b) {
        const double* lc = &lambda_[t_.child(i, b) * n];
        p_.f_jacobian(x, u, t_.noise.atom(b), fx_, fu_);
        for (std::size_t r = 0; r < n; ++r) {
          if (lc[r] == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) lam[j] += fx_[r * n + j] * lc[r];
          for (std::size_t j = 0; j < mc; ++j) gu[j] += fu_[r * mc + j] * lc[r];
        }
      }
    }
  }

  const Problem& p_;
  const ScenarioTree& t_;
  Ensemble x0_;  // copied: callers often pass temporaries
  OcpCost cost_;
  double rho0_ = 0.0;
  std::vector<double> theta0_;
  std::vector<double> states_, lambda_, costs_, weights_, fx_, fu_, gx_, gu_;
  std::size_t bad_node_ = ScenarioTree::npos;
};

inline Rollout rollout(const Problem& p, const ScenarioTree& t, const Ensemble& x0, const DecisionVector& d,
                       const OcpCost& cost) {
  TreeObjective obj(p, t, x0, cost);
  return obj.rollout(d);
}

/// Objective and its gradient over the decision vector (same layout as d).
inline double objective_and_gradient(const Problem& p, const ScenarioTree& t, const Ensemble& x0,
                                     const DecisionVector& d, const OcpCost& cost, DecisionVector& grad) {
  TreeObjective obj(p, t, x0, cost);
  obj.check_sizes(d);
  grad.controls.assign(d.controls.size(), 0.0);
  grad.thetas.assign(d.thetas.size(), 0.0);
  const double f = obj.evaluate(d.controls, d.thetas, grad.controls, grad.thetas);
  if (!std::isfinite(f)) return obj.rollout(d).objective;  // throws with the node
  return f;
}

}  // namespace riskmpc

#endif  // RISKMPC_TREE_HPP
