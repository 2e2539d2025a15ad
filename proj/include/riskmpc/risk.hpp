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

#ifndef RISKMPC_RISK_HPP
#define RISKMPC_RISK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/ensemble.hpp"
#include "riskmpc/error.hpp"
#include "riskmpc/optimizer.hpp"

namespace riskmpc {

enum class RiskKind { kExpectation, kAvarExact, kAvarSoftplus, kKlDivergence, kCustomPsi };

inline const char* to_string(RiskKind k) {
  switch (k) {
    case RiskKind::kExpectation: return "expectation";
    case RiskKind::kAvarExact: return "avar_exact";
    case RiskKind::kAvarSoftplus: return "avar_softplus";
    case RiskKind::kKlDivergence: return "kl_divergence";
    case RiskKind::kCustomPsi: return "custom_psi";
  }
  return "unknown";
}

/**
 * User-supplied psi for risk measures of the form inf_theta E[theta + psi(Z - theta)].
 *
 * dpsi must return the right derivative of psi; psi must be nondecreasing
 * and convex for the inner bisection to locate the infimum.
 */
struct CustomPsi {
  std::string name;
  std::function<double(double)> psi;
  std::function<double(double)> dpsi;
  std::function<double(double)> d2psi;  // optional; central differences of dpsi otherwise
  bool smooth = false;
};

struct RiskSpec {
  RiskKind kind = RiskKind::kExpectation;
  double alpha = 1.0;  // AV@R confidence level
  double c = 0.0;      // divergence constraint level
  std::shared_ptr<const CustomPsi> custom;

  // Caps on the parameter set Theta.
  double theta_lo = -1e6;
  double theta_hi = 1e6;
  double log_t_lo = -20.0;  // bounds on log(theta_1) for the KL measure
  double log_t_hi = 20.0;

  static RiskSpec expectation() { return RiskSpec{}; }
  static RiskSpec avar_exact(double alpha) { return make(RiskKind::kAvarExact, alpha, 0.0); }
  static RiskSpec avar_softplus(double alpha) { return make(RiskKind::kAvarSoftplus, alpha, 0.0); }
  static RiskSpec kl_divergence(double c) { return make(RiskKind::kKlDivergence, 1.0, c); }
  static RiskSpec custom_psi(CustomPsi psi) {
    RiskSpec s;
    s.kind = RiskKind::kCustomPsi;
    s.custom = std::make_shared<const CustomPsi>(std::move(psi));
    s.validate();
    return s;
  }

  /// Length of theta in the parametric representation used by the solver.
  int theta_dim() const noexcept {
    switch (kind) {
      case RiskKind::kExpectation:
      case RiskKind::kAvarExact: return 0;
      case RiskKind::kAvarSoftplus:
      case RiskKind::kCustomPsi: return 1;
      case RiskKind::kKlDivergence: return 2;
    }
    return 0;
  }

  bool is_parametric() const noexcept { return theta_dim() > 0; }

  /// True when the objective may be differentiated (tree gradient path).
  bool is_smooth() const noexcept {
    switch (kind) {
      case RiskKind::kAvarExact: return false;
      case RiskKind::kCustomPsi: return custom && custom->smooth;
      default: return true;
    }
  }

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("RiskSpec: alpha must lie in (0, 1]");
    if (!(c >= 0.0) || !std::isfinite(c)) throw InvalidArgument("RiskSpec: c must be a finite value >= 0");
    if (!(theta_lo < theta_hi)) throw InvalidArgument("RiskSpec: theta_lo must be below theta_hi");
    if (!(log_t_lo < log_t_hi)) throw InvalidArgument("RiskSpec: log_t_lo must be below log_t_hi");
    if (kind == RiskKind::kCustomPsi && (!custom || !custom->psi || !custom->dpsi)) {
      throw InvalidArgument("RiskSpec: custom_psi requires psi and dpsi");
    }
  }

 private:
  static RiskSpec make(RiskKind k, double alpha, double c) {
    RiskSpec s;
    s.kind = k;
    s.alpha = alpha;
    s.c = c;
    s.validate();
    return s;
  }
};

struct RiskValue {
  double value = 0.0;
  std::vector<double> theta_star;
  int inner_iterations = 0;
};

namespace detail {

inline double softplus(double w) {
  return w > 30.0 ? w + std::log1p(std::exp(-w)) : std::log1p(std::exp(w));
}

inline double sigmoid(double w) {
  if (w >= 0.0) return 1.0 / (1.0 + std::exp(-w));
  const double e = std::exp(w);
  return e / (1.0 + e);
}

inline void require_theta(const RiskSpec& spec, std::span<const double> theta) {
  if (static_cast<int>(theta.size()) != spec.theta_dim()) {
    throw InvalidArgument(std::string("psi: ") + to_string(spec.kind) + " expects theta of length " +
                          std::to_string(spec.theta_dim()) + ", got " + std::to_string(theta.size()));
  }
  if (spec.kind == RiskKind::kKlDivergence && !(theta[0] > 0.0)) {
    throw InvalidArgument("psi: kl_divergence requires theta_1 > 0");
  }
}

}  // namespace detail

/// Psi(z, theta) together with its partial derivatives. Second derivatives
/// in theta are filled for the scalar-theta kinds only.
struct PsiEval {
  double value = 0.0;
  double dz = 0.0;
  double dtheta[2] = {0.0, 0.0};
  double dzz = 0.0;
  double dz_dtheta[2] = {0.0, 0.0};     // d^2 / dz dtheta_j
  double dtheta2[3] = {0.0, 0.0, 0.0};  // theta Hessian: (1,1), (1,2), (2,2)
};

inline PsiEval psi_eval(const RiskSpec& spec, double z, std::span<const double> theta) {
  detail::require_theta(spec, theta);
  PsiEval out;
  switch (spec.kind) {
    case RiskKind::kExpectation:
      out.value = z;
      out.dz = 1.0;
      break;
    case RiskKind::kAvarExact:
      throw InvalidArgument("psi: avar_exact is evaluated directly; use avar_softplus or custom_psi");
    case RiskKind::kAvarSoftplus: {
      const double w = z - theta[0];
      const double s = detail::sigmoid(w) / spec.alpha;
      out.value = theta[0] + detail::softplus(w) / spec.alpha;
      out.dz = s;
      out.dtheta[0] = 1.0 - s;
      out.dzz = s * (1.0 - detail::sigmoid(w));
      out.dz_dtheta[0] = -out.dzz;
      out.dtheta2[0] = out.dzz;
      break;
    }
    case RiskKind::kKlDivergence: {
      const double t = theta[0];
      const double y = (z - theta[1]) / t;
      const double e = std::exp(y);
      const double em1 = std::expm1(y);
      out.value = t * spec.c + theta[1] + t * em1;
      out.dz = e;
      out.dtheta[0] = spec.c + em1 - y * e;
      out.dtheta[1] = 1.0 - e;
      // The Hessian in (z, theta_1, theta_2) is (e / t) v v^T with v = (1, -y, -1).
      out.dzz = e / t;
      out.dz_dtheta[0] = -y * out.dzz;
      out.dz_dtheta[1] = -out.dzz;
      out.dtheta2[0] = y * y * out.dzz;
      out.dtheta2[1] = y * out.dzz;
      out.dtheta2[2] = out.dzz;
      break;
    }
    case RiskKind::kCustomPsi: {
      const double w = z - theta[0];
      const double dp = spec.custom->dpsi(w);
      out.value = theta[0] + spec.custom->psi(w);
      out.dz = dp;
      out.dtheta[0] = 1.0 - dp;
      if (spec.custom->d2psi) {
        out.dzz = spec.custom->d2psi(w);
      } else {
        const double h = 1e-6 * std::max(1.0, std::abs(w));
        out.dzz = (spec.custom->dpsi(w + h) - spec.custom->dpsi(w - h)) / (2.0 * h);
      }
      out.dz_dtheta[0] = -out.dzz;
      out.dtheta2[0] = out.dzz;
      break;
    }
  }
  return out;
}

inline double psi(const RiskSpec& spec, double z, std::span<const double> theta) {
  return psi_eval(spec, z, theta).value;
}

/// E[Psi(Z, theta)] for a fixed theta (the stage cost of the fixed-parameter problem).
inline double expected_psi(const RiskSpec& spec, const Ensemble& z, std::span<const double> theta) {
  z.require_scalar("expected_psi");
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += z.prob(i) * psi(spec, z.value(i), theta);
  return s;
}

namespace detail {

inline double weighted_max(const Ensemble& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z.prob(i) > 0.0) m = std::max(m, z.value(i));
  }
  return m;
}

inline double weighted_min(const Ensemble& z) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z.prob(i) > 0.0) m = std::min(m, z.value(i));
  }
  return m;
}

/// log E[exp(Z / t)] - max(Z)/t, evaluated as log1p(E[expm1((Z - max)/t)]).
inline double shifted_log_mgf(const Ensemble& z, double t, double zmax) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += z.prob(i) * std::expm1((z.value(i) - zmax) / t);
  return std::log1p(s);
}

/// Optimal theta_2 of the KL parametric form for fixed theta_1 = t.
inline double kl_profile_theta2(const Ensemble& z, double t) {
  const double zmax = weighted_max(z);
  return zmax + t * shifted_log_mgf(z, t, zmax);
}

inline RiskValue avar_exact(const RiskSpec& spec, const Ensemble& z) {
  std::vector<std::pair<double, double>> s;
  s.reserve(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s.emplace_back(z.value(i), z.prob(i));
  std::sort(s.begin(), s.end());

  // Mean of the upper alpha tail.
  double remaining = spec.alpha, acc = 0.0;
  for (std::size_t k = s.size(); k-- > 0;) {
    const double take = std::min(s[k].second, remaining);
    acc += take * s[k].first;
    remaining -= take;
    if (remaining <= 0.0) break;
  }

  // Smallest theta with P(Z > theta) <= alpha.
  double tail = 0.0;
  for (const auto& [v, p] : s) tail += p;
  double var = s.back().first;
  for (std::size_t k = 0; k < s.size(); ++k) {
    tail -= s[k].second;
    if (k + 1 < s.size() && s[k + 1].first == s[k].first) continue;
    if (tail <= spec.alpha + 1e-14) {
      var = s[k].first;
      break;
    }
  }
  return RiskValue{acc / spec.alpha, {var}, 0};
}

// Scalar theta: bisection on the right derivative of theta -> E[Psi(Z, theta)].
inline RiskValue inner_bisection(const RiskSpec& spec, const Ensemble& z) {
  auto derivative = [&](double theta) {
    double d = 0.0;
    const double th[2] = {theta, 0.0};
    for (std::size_t i = 0; i < z.size(); ++i) d += z.prob(i) * psi_eval(spec, z.value(i), std::span<const double>(th, 1)).dtheta[0];
    if (!std::isfinite(d)) {
      throw SolverError("inner_minimize: non-finite derivative at theta = " + std::to_string(theta), {theta});
    }
    return d;
  };
  int iters = 0;
  double lo = std::max(spec.theta_lo, weighted_min(z) - 1.0);
  double hi = std::min(spec.theta_hi, weighted_max(z) + 1.0);
  if (lo >= hi) lo = spec.theta_lo, hi = spec.theta_hi;
  double width = hi - lo;
  double theta_star = 0.0;
  bool at_cap = false;  // theta_star fixed without bisection
  double d_lo;
  while ((d_lo = derivative(lo)) >= 0.0) {
    ++iters;
    if (d_lo == 0.0) {
      // Zero right derivative: lo already minimizes the convex objective.
      theta_star = lo;
      at_cap = true;
      break;
    }
    if (lo <= spec.theta_lo) {
      theta_star = spec.theta_lo;
      at_cap = true;
      break;
    }
    hi = lo;
    lo = std::max(spec.theta_lo, lo - width);
    width *= 2.0;
  }
  if (!at_cap) {
    while (derivative(hi) < 0.0) {
      ++iters;
      if (hi >= spec.theta_hi) {
        theta_star = spec.theta_hi;
        at_cap = true;
        break;
      }
      lo = hi;
      hi = std::min(spec.theta_hi, hi + width);
      width *= 2.0;
    }
  }
  if (!at_cap) {
    // Invariant: derivative(lo) < 0 <= derivative(hi).
    while (hi - lo > 1e-10) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      ++iters;
      if (derivative(mid) >= 0.0) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    theta_star = hi;
  }
  const double th[1] = {theta_star};
  return RiskValue{expected_psi(spec, z, std::span<const double>(th, 1)), {theta_star}, iters};
}

inline double kl_objective(const RiskSpec& spec, const Ensemble& z, double s, double theta2,
                           std::span<double> grad) {
  const double t = std::exp(s);
  const double th[2] = {t, theta2};
  double v = 0.0, g0 = 0.0, g1 = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const PsiEval e = psi_eval(spec, z.value(i), th);
    v += z.prob(i) * e.value;
    g0 += z.prob(i) * e.dtheta[0];
    g1 += z.prob(i) * e.dtheta[1];
  }
  if (!grad.empty()) {
    grad[0] = g0 * t;
    grad[1] = g1;
  }
  return v;
}

inline RiskValue inner_kl(const RiskSpec& spec, const Ensemble& z, std::span<const double> theta0) {
  if (theta0.size() == 2 && !(theta0[0] > 0.0)) {
    throw InvalidArgument("inner_minimize: kl_divergence requires theta_1 > 0");
  }
  const double zmax = weighted_max(z);
  double top_mass = 0.0, m = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z.value(i) == zmax) top_mass += z.prob(i);
    m += z.prob(i) * z.value(i);
  }
  // If the divergence budget can move all mass onto the largest atom, the
  // infimum is approached as theta_1 -> 0; report the capped boundary point.
  if (top_mass >= std::exp(-spec.c)) {
    const double s = spec.log_t_lo;
    const double theta2 = kl_profile_theta2(z, std::exp(s));
    return RiskValue{kl_objective(spec, z, s, theta2, {}), {std::exp(s), theta2}, 0};
  }

  double var = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) var += z.prob(i) * (z.value(i) - m) * (z.value(i) - m);
  // Diagonal preconditioning: theta_2 and the objective are measured in units of the spread.
  const double scale = std::max(std::sqrt(var), 1e-12 * std::max(1.0, std::abs(zmax)));

  double s0;
  double th2;
  if (theta0.size() == 2) {
    s0 = std::log(theta0[0]);
    th2 = theta0[1];
  } else {
    s0 = std::clamp(std::log(scale), spec.log_t_lo, spec.log_t_hi);
    th2 = kl_profile_theta2(z, std::exp(s0));
  }
  ObjectiveFn fn = [&](std::span<const double> x, std::span<double> g) {
    const double f = kl_objective(spec, z, x[0], x[1] * scale, g);
    g[0] /= scale;
    return f / scale;
  };
  SolveOptions opts;
  opts.tol_grad_inf = 1e-10;
  opts.max_iter = 1000;
  MinimizeResult r = minimize(fn, {s0, th2 / scale}, opts);
  if (!r.converged() && r.grad_inf > 1e-6) {
    throw SolverError(std::string("inner_minimize: KL parametric minimization stopped (") + to_string(r.status) +
                          "), gradient norm " + std::to_string(r.grad_inf),
                      {std::exp(r.x[0]), r.x[1] * scale}, r.f * scale);
  }
  // The infimum may sit on the boundary theta_1 -> inf (c = 0); accept the capped point.
  double s = r.x[0];
  double theta2 = r.x[1] * scale;
  double value = r.f * scale;
  if (s < spec.log_t_lo || s > spec.log_t_hi) {
    s = std::clamp(s, spec.log_t_lo, spec.log_t_hi);
    theta2 = kl_profile_theta2(z, std::exp(s));
    value = kl_objective(spec, z, s, theta2, {});
  }
  return RiskValue{value, {std::exp(s), theta2}, r.iterations};
}

}  // namespace detail

/**
 * Minimizes theta -> E[Psi(Z, theta)] for a parametric risk measure.
 *
 * Scalar theta (softplus AV@R, custom psi) uses bisection on the right
 * derivative, with the bracket grown geometrically from [min Z - 1, max Z + 1]
 * and capped at [theta_lo, theta_hi]. Ties resolve to the smallest minimizer.
 * The KL measure runs the quasi-Newton minimizer on (log theta_1, theta_2);
 * theta0 (if non-empty) is its starting point.
 */
inline RiskValue inner_minimize(const RiskSpec& spec, const Ensemble& z, std::span<const double> theta0 = {}) {
  spec.validate();
  z.require_scalar("inner_minimize");
  switch (spec.theta_dim()) {
    case 1: return detail::inner_bisection(spec, z);
    case 2: return detail::inner_kl(spec, z, theta0);
    default:
      throw InvalidArgument(std::string("inner_minimize: ") + to_string(spec.kind) + " has no parametric form");
  }
}

/// t -> t (c + log E[exp(Z / t)]) minimized over log t in [log_t_lo, log_t_hi].
inline ScalarMinimum kl_reduced_minimum(const Ensemble& z, double c, double log_t_lo = -20.0,
                                        double log_t_hi = 20.0) {
  z.require_scalar("kl_reduced");
  if (!(c >= 0.0)) throw InvalidArgument("kl_reduced: c must be >= 0");
  const double zmax = detail::weighted_max(z);
  auto objective = [&](double log_t) {
    const double t = std::exp(log_t);
    return t * c + zmax + t * detail::shifted_log_mgf(z, t, zmax);
  };
  ScalarMinimum m = minimize_scalar_convex(objective, log_t_lo, log_t_hi, 1e-12);
  m.t = std::exp(m.t);
  return m;
}

inline double kl_reduced(double c, const Ensemble& z) { return kl_reduced_minimum(z, c).value; }

/// Risk of a scalar ensemble. Parametric kinds report the minimizing theta.
inline RiskValue evaluate(const RiskSpec& spec, const Ensemble& z) {
  spec.validate();
  z.require_scalar("evaluate");
  switch (spec.kind) {
    case RiskKind::kExpectation: return RiskValue{scalar_mean(z), {}, 0};
    case RiskKind::kAvarExact: return detail::avar_exact(spec, z);
    default: return inner_minimize(spec, z);
  }
}

}  // namespace riskmpc

#endif  // RISKMPC_RISK_HPP
