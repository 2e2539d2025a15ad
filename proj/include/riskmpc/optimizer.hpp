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

#ifndef RISKMPC_OPTIMIZER_HPP
#define RISKMPC_OPTIMIZER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/error.hpp"

namespace riskmpc {

struct SolveOptions {
  double tol_grad_inf = 1e-7;
  int max_iter = 2000;
  int memory = 10;          // quasi-Newton history length
  double armijo_c1 = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 60;
  // Round-off allowance for the approximate Wolfe test, relative to |f|.
  double roundoff_rel = 1e-12;
  // Second-order tree iterations run by solve_ocp before the quasi-Newton
  // polish; 0 disables them.
  int newton_max_iter = 100;

  void validate() const {
    if (!(tol_grad_inf > 0.0)) throw InvalidArgument("SolveOptions: tol_grad_inf must be > 0");
    if (max_iter <= 0) throw InvalidArgument("SolveOptions: max_iter must be > 0");
    if (memory <= 0) throw InvalidArgument("SolveOptions: memory must be > 0");
    if (!(armijo_c1 > 0.0 && armijo_c1 < 0.5)) throw InvalidArgument("SolveOptions: armijo_c1 must lie in (0, 0.5)");
    if (!(backtrack > 0.0 && backtrack < 1.0)) throw InvalidArgument("SolveOptions: backtrack must lie in (0, 1)");
    if (max_backtracks <= 0) throw InvalidArgument("SolveOptions: max_backtracks must be > 0");
    if (!(roundoff_rel >= 0.0)) throw InvalidArgument("SolveOptions: roundoff_rel must be >= 0");
    if (newton_max_iter < 0) throw InvalidArgument("SolveOptions: newton_max_iter must be >= 0");
  }
};

enum class MinimizeStatus { kConverged, kMaxIterations, kLineSearchFailed };

inline const char* to_string(MinimizeStatus s) {
  switch (s) {
    case MinimizeStatus::kConverged: return "converged";
    case MinimizeStatus::kMaxIterations: return "max_iterations";
    case MinimizeStatus::kLineSearchFailed: return "line_search_failed";
  }
  return "unknown";
}

struct MinimizeResult {
  std::vector<double> x;
  double f = 0.0;
  double grad_inf = 0.0;
  int iterations = 0;
  int evaluations = 0;
  MinimizeStatus status = MinimizeStatus::kConverged;

  bool converged() const noexcept { return status == MinimizeStatus::kConverged; }
};

/// Writes the gradient at x into grad and returns the objective value.
using ObjectiveFn = std::function<double(std::span<const double> x, std::span<double> grad)>;

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double inf_norm(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(std::span<const double> a) {
  for (double v : a) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace detail

/**
 * Limited-memory BFGS with Armijo backtracking.
 *
 * Terminates once the gradient infinity norm drops to opts.tol_grad_inf.
 * Trial points with non-finite value are treated as a failed Armijo test and
 * backtracked. Near the optimum the Armijo decrease drops below the
 * round-off in f; there a step is also accepted under the approximate Wolfe
 * conditions of Hager and Zhang (f may rise by at most roundoff_rel * |f|,
 * and the directional derivative must shrink). When backtracking along the
 * quasi-Newton direction fails, one steepest-descent step is attempted before
 * giving up with kLineSearchFailed.
 *
 * Throws SolverError if the objective is not finite at x0.
 */
inline MinimizeResult minimize(const ObjectiveFn& fn, std::vector<double> x0, const SolveOptions& opts = {}) {
  opts.validate();
  const std::size_t n = x0.size();
  MinimizeResult res;
  res.x = std::move(x0);
  std::vector<double> g(n), x_trial(n), g_trial(n), d(n), alpha_hist;

  res.f = fn(res.x, g);
  res.evaluations = 1;
  if (!std::isfinite(res.f) || !detail::all_finite(g)) {
    throw SolverError("minimize: objective or gradient not finite at the initial point", res.x, res.f);
  }
  res.grad_inf = detail::inf_norm(g);
  if (res.grad_inf <= opts.tol_grad_inf) return res;

  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;

  auto direction = [&](bool steepest) {
    for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    if (steepest || s_hist.empty()) return;
    const std::size_t m = s_hist.size();
    alpha_hist.assign(m, 0.0);
    for (std::size_t k = m; k-- > 0;) {
      alpha_hist[k] = rho_hist[k] * detail::dot(s_hist[k], d);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha_hist[k] * y_hist[k][i];
    }
    const double gamma = detail::dot(s_hist.back(), y_hist.back()) / detail::dot(y_hist.back(), y_hist.back());
    for (double& v : d) v *= gamma;
    for (std::size_t k = 0; k < m; ++k) {
      const double beta = rho_hist[k] * detail::dot(y_hist[k], d);
      for (std::size_t i = 0; i < n; ++i) d[i] += (alpha_hist[k] - beta) * s_hist[k][i];
    }
  };

  // Backtracking along d; on success x_trial/g_trial hold the accepted point.
  auto line_search = [&](double step0, double& f_trial) {
    const double slope = detail::dot(g, d);
    double step = step0;
    for (int b = 0; b < opts.max_backtracks; ++b) {
      for (std::size_t i = 0; i < n; ++i) x_trial[i] = res.x[i] + step * d[i];
      f_trial = fn(x_trial, g_trial);
      ++res.evaluations;
      if (std::isfinite(f_trial) && detail::all_finite(g_trial)) {
        if (f_trial <= res.f + opts.armijo_c1 * step * slope && f_trial < res.f) return true;
        const double dslope = detail::dot(g_trial, d);
        if (f_trial <= res.f + opts.roundoff_rel * std::abs(res.f) && dslope >= 0.9 * slope &&
            dslope <= -0.8 * slope) {
          return true;
        }
      }
      step *= opts.backtrack;
    }
    return false;
  };

  while (res.iterations < opts.max_iter) {
    bool steepest = s_hist.empty();
    direction(steepest);
    if (detail::dot(g, d) >= 0.0) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      steepest = true;
      direction(true);
    }
    double f_trial = 0.0;
    const double first_step = steepest ? std::min(1.0, 1.0 / detail::inf_norm(g)) : 1.0;
    bool ok = line_search(first_step, f_trial);
    if (!ok && !steepest) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      direction(true);
      ok = line_search(std::min(1.0, 1.0 / detail::inf_norm(g)), f_trial);
    }
    if (!ok) {
      res.status = MinimizeStatus::kLineSearchFailed;
      return res;
    }

    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_trial[i] - res.x[i];
      y[i] = g_trial[i] - g[i];
    }
    const double sy = detail::dot(s, y);
    if (sy > 1e-12 * std::sqrt(detail::dot(s, s) * detail::dot(y, y)) && sy > 0.0) {
      if (static_cast<int>(s_hist.size()) == opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }
    std::swap(res.x, x_trial);
    std::swap(g, g_trial);
    res.f = f_trial;
    res.grad_inf = detail::inf_norm(g);
    ++res.iterations;
    if (res.grad_inf <= opts.tol_grad_inf) {
      res.status = MinimizeStatus::kConverged;
      return res;
    }
  }
  res.status = MinimizeStatus::kMaxIterations;
  return res;
}

struct ScalarMinimum {
  double t = 0.0;
  double value = 0.0;
};

/// Golden-section search on [lo, hi] until the bracket is no wider than tol.
/// Unimodality of g on the bracket is the caller's contract.
inline ScalarMinimum minimize_scalar_convex(const std::function<double(double)>& g, double lo, double hi,
                                            double tol) {
  if (!(lo <= hi)) throw InvalidArgument("minimize_scalar_convex: lo must not exceed hi");
  if (!(tol > 0.0)) throw InvalidArgument("minimize_scalar_convex: tol must be > 0");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double gc = g(c), gd = g(d);
  ScalarMinimum best{c, gc};
  if (gd < best.value) best = {d, gd};
  while (b - a > tol) {
    if (gc <= gd) {
      b = d;
      d = c;
      gd = gc;
      c = b - inv_phi * (b - a);
      gc = g(c);
      if (gc < best.value) best = {c, gc};
    } else {
      a = c;
      c = d;
      gc = gd;
      d = a + inv_phi * (b - a);
      gd = g(d);
      if (gd < best.value) best = {d, gd};
    }
    if (c == d) break;
  }
  for (double t : {lo, hi}) {
    const double gt = g(t);
    if (gt < best.value) best = {t, gt};
  }
  return best;
}

}  // namespace riskmpc

#endif  // RISKMPC_OPTIMIZER_HPP
