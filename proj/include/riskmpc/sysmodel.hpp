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

#ifndef RISKMPC_SYSMODEL_HPP
#define RISKMPC_SYSMODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/ensemble.hpp"
#include "riskmpc/error.hpp"

namespace riskmpc {

/**
 * Control problem: x' = f(x, u, w), stage cost g(x, u), i.i.d. noise law.
 *
 * Jacobians are row-major: fx is state_dim x state_dim, fu is
 * state_dim x control_dim. All callables must be reentrant.
 *
 * The second-order callables are optional; the Newton solver falls back to
 * central differences of the first derivatives when they are absent.
 * f_hessian returns the lambda-weighted sum of the component Hessians.
 */
struct Problem {
  using Dynamics = std::function<void(std::span<const double> x, std::span<const double> u,
                                      std::span<const double> w, std::span<double> x_next)>;
  using DynamicsJacobian = std::function<void(std::span<const double> x, std::span<const double> u,
                                              std::span<const double> w, std::span<double> fx, std::span<double> fu)>;
  using StageCost = std::function<double(std::span<const double> x, std::span<const double> u)>;
  using StageCostGradient =
      std::function<void(std::span<const double> x, std::span<const double> u, std::span<double> gx, std::span<double> gu)>;
  using StageCostHessian = std::function<void(std::span<const double> x, std::span<const double> u,
                                              std::span<double> gxx, std::span<double> gux, std::span<double> guu)>;
  using DynamicsHessian =
      std::function<void(std::span<const double> x, std::span<const double> u, std::span<const double> w,
                         std::span<const double> lambda, std::span<double> hxx, std::span<double> hux,
                         std::span<double> huu)>;

  std::string name;
  std::size_t state_dim = 1;
  std::size_t control_dim = 1;
  std::size_t noise_dim = 1;
  Dynamics f;
  DynamicsJacobian f_jacobian;
  StageCost g;
  StageCostGradient g_gradient;
  StageCostHessian g_hessian;  // optional
  DynamicsHessian f_hessian;   // optional
  Ensemble noise = Ensemble::point_mass(0.0);
  double g_lower_bound = 0.0;
  // Free-form parameters echoed into manifests (e.g. gamma).
  std::vector<std::pair<std::string, double>> parameters;

  void validate() const {
    if (state_dim == 0 || control_dim == 0 || noise_dim == 0) throw InvalidArgument("Problem: dimensions must be positive");
    if (!f || !f_jacobian || !g || !g_gradient) throw InvalidArgument("Problem '" + name + "': missing callable");
    if (noise.dim() != noise_dim) throw InvalidArgument("Problem '" + name + "': noise dimension mismatch");
  }
};

/// X(k+1) = 1.5 X(k) + U(k) + W(k), g = x^2 + 5u^2, W = +-0.6 with probability 1/2.
inline Problem make_example1() {
  Problem p;
  p.name = "example1";
  p.f = [](std::span<const double> x, std::span<const double> u, std::span<const double> w, std::span<double> xn) {
    xn[0] = 1.5 * x[0] + u[0] + w[0];
  };
  p.f_jacobian = [](std::span<const double>, std::span<const double>, std::span<const double>, std::span<double> fx,
                    std::span<double> fu) {
    fx[0] = 1.5;
    fu[0] = 1.0;
  };
  p.g = [](std::span<const double> x, std::span<const double> u) { return x[0] * x[0] + 5.0 * u[0] * u[0]; };
  p.g_gradient = [](std::span<const double> x, std::span<const double> u, std::span<double> gx, std::span<double> gu) {
    gx[0] = 2.0 * x[0];
    gu[0] = 10.0 * u[0];
  };
  p.g_hessian = [](std::span<const double>, std::span<const double>, std::span<double> gxx, std::span<double> gux,
                   std::span<double> guu) {
    gxx[0] = 2.0;
    gux[0] = 0.0;
    guu[0] = 10.0;
  };
  p.f_hessian = [](std::span<const double>, std::span<const double>, std::span<const double>,
                   std::span<const double>, std::span<double> hxx, std::span<double> hux, std::span<double> huu) {
    hxx[0] = hux[0] = huu[0] = 0.0;
  };
  p.noise = Ensemble::scalar({0.6, -0.6}, {0.5, 0.5});
  return p;
}

/// X(k+1) = (U(k) - X(k))^2 + W(k), g = x^2 + gamma u^2, W = 1 w.p. 0.7 and 0.25 w.p. 0.3.
inline Problem make_example2(double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("make_example2: gamma must be >= 0");
  Problem p;
  p.name = "example2";
  p.parameters = {{"gamma", gamma}};
  p.f = [](std::span<const double> x, std::span<const double> u, std::span<const double> w, std::span<double> xn) {
    const double d = u[0] - x[0];
    xn[0] = d * d + w[0];
  };
  p.f_jacobian = [](std::span<const double> x, std::span<const double> u, std::span<const double>, std::span<double> fx,
                    std::span<double> fu) {
    const double d = u[0] - x[0];
    fx[0] = -2.0 * d;
    fu[0] = 2.0 * d;
  };
  p.g = [gamma](std::span<const double> x, std::span<const double> u) { return x[0] * x[0] + gamma * u[0] * u[0]; };
  p.g_gradient = [gamma](std::span<const double> x, std::span<const double> u, std::span<double> gx,
                         std::span<double> gu) {
    gx[0] = 2.0 * x[0];
    gu[0] = 2.0 * gamma * u[0];
  };
  p.g_hessian = [gamma](std::span<const double>, std::span<const double>, std::span<double> gxx,
                        std::span<double> gux, std::span<double> guu) {
    gxx[0] = 2.0;
    gux[0] = 0.0;
    guu[0] = 2.0 * gamma;
  };
  p.f_hessian = [](std::span<const double>, std::span<const double>, std::span<const double>,
                   std::span<const double> lambda, std::span<double> hxx, std::span<double> hux,
                   std::span<double> huu) {
    hxx[0] = 2.0 * lambda[0];
    hux[0] = -2.0 * lambda[0];
    huu[0] = 2.0 * lambda[0];
  };
  p.noise = Ensemble::scalar({1.0, 0.25}, {0.7, 0.3});
  return p;
}

/// Looks up a built-in problem by name.
inline Problem make_problem(const std::string& name, double gamma = 15.0) {
  if (name == "example1") return make_example1();
  if (name == "example2") return make_example2(gamma);
  throw InvalidArgument("unknown problem '" + name + "' (expected example1 or example2)");
}

namespace detail {

inline double fd_step(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }

/// Stage-cost Hessian blocks by central differences of g_gradient.
inline void fd_cost_hessian(const Problem& p, std::span<const double> x, std::span<const double> u,
                            std::span<double> gxx, std::span<double> gux, std::span<double> guu) {
  const std::size_t n = p.state_dim, m = p.control_dim;
  std::vector<double> xs(x.begin(), x.end()), us(u.begin(), u.end());
  std::vector<double> gxp(n), gup(m), gxm(n), gum(m);
  auto diff = [&](std::vector<double>& var, std::size_t j, bool is_x) {
    const double h = fd_step(var[j]), keep = var[j];
    var[j] = keep + h;
    p.g_gradient(xs, us, gxp, gup);
    var[j] = keep - h;
    p.g_gradient(xs, us, gxm, gum);
    var[j] = keep;
    if (is_x) {
      for (std::size_t l = 0; l < n; ++l) gxx[l * n + j] = (gxp[l] - gxm[l]) / (2.0 * h);
      for (std::size_t a = 0; a < m; ++a) gux[a * n + j] = (gup[a] - gum[a]) / (2.0 * h);
    } else {
      for (std::size_t a = 0; a < m; ++a) guu[a * m + j] = (gup[a] - gum[a]) / (2.0 * h);
    }
  };
  for (std::size_t j = 0; j < n; ++j) diff(xs, j, true);
  for (std::size_t j = 0; j < m; ++j) diff(us, j, false);
}

/// lambda-weighted dynamics Hessian blocks by central differences of f_jacobian.
inline void fd_dynamics_hessian(const Problem& p, std::span<const double> x, std::span<const double> u,
                                std::span<const double> w, std::span<const double> lambda, std::span<double> hxx,
                                std::span<double> hux, std::span<double> huu) {
  const std::size_t n = p.state_dim, m = p.control_dim;
  std::vector<double> xs(x.begin(), x.end()), us(u.begin(), u.end());
  std::vector<double> fxp(n * n), fup(n * m), fxm(n * n), fum(n * m);
  auto diff = [&](std::vector<double>& var, std::size_t j, bool is_x) {
    const double h = fd_step(var[j]), keep = var[j];
    var[j] = keep + h;
    p.f_jacobian(xs, us, w, fxp, fup);
    var[j] = keep - h;
    p.f_jacobian(xs, us, w, fxm, fum);
    var[j] = keep;
    if (is_x) {
      for (std::size_t l = 0; l < n; ++l) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += lambda[r] * (fxp[r * n + l] - fxm[r * n + l]);
        hxx[l * n + j] = acc / (2.0 * h);
      }
      for (std::size_t a = 0; a < m; ++a) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += lambda[r] * (fup[r * m + a] - fum[r * m + a]);
        hux[a * n + j] = acc / (2.0 * h);
      }
    } else {
      for (std::size_t a = 0; a < m; ++a) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += lambda[r] * (fup[r * m + a] - fum[r * m + a]);
        huu[a * m + j] = acc / (2.0 * h);
      }
    }
  };
  for (std::size_t j = 0; j < n; ++j) diff(xs, j, true);
  for (std::size_t j = 0; j < m; ++j) diff(us, j, false);
}

}  // namespace detail

/// Stage-cost Hessian blocks (gxx n x n, gux m x n, guu m x m), analytic when available.
inline void cost_hessian(const Problem& p, std::span<const double> x, std::span<const double> u, std::span<double> gxx,
                         std::span<double> gux, std::span<double> guu) {
  if (p.g_hessian) {
    p.g_hessian(x, u, gxx, gux, guu);
  } else {
    detail::fd_cost_hessian(p, x, u, gxx, gux, guu);
  }
}

/// sum_r lambda_r times the Hessian of f_r, analytic when available.
inline void dynamics_hessian(const Problem& p, std::span<const double> x, std::span<const double> u,
                             std::span<const double> w, std::span<const double> lambda, std::span<double> hxx,
                             std::span<double> hux, std::span<double> huu) {
  if (p.f_hessian) {
    p.f_hessian(x, u, w, lambda, hxx, hux, huu);
  } else {
    detail::fd_dynamics_hessian(p, x, u, w, lambda, hxx, hux, huu);
  }
}

struct JacobianReport {
  double max_rel_error = 0.0;
  double min_cost_seen = 0.0;  // smallest g over the probes
  int probes = 0;
  bool passed = true;
};

/**
 * Compares analytic Jacobians with central differences at random probes.
 *
 * Probes draw x, u uniformly from [-2, 2] and w from the noise atoms. The
 * relative error is |analytic - fd| / max(1, |fd|). Analytic Hessians, when
 * supplied, are checked the same way against differences of the Jacobians.
 */
inline JacobianReport probe_jacobians(const Problem& p, int n_probes, std::uint64_t seed, double threshold = 1e-5) {
  if (n_probes < 1) throw InvalidArgument("probe_jacobians: n_probes must be >= 1");
  p.validate();
  const std::size_t n = p.state_dim, m = p.control_dim;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::uniform_int_distribution<std::size_t> pick(0, p.noise.size() - 1);

  JacobianReport rep;
  rep.min_cost_seen = std::numeric_limits<double>::infinity();
  std::vector<double> x(n), u(m), fx(n * n), fu(n * m), gx(n), gu(m), xp(n), xm(n), lam(n);
  std::vector<double> hxx(n * n), hux(m * n), huu(m * m), fxx(n * n), fux(m * n), fuu(m * m);
  auto note = [&](double analytic, double fd) {
    rep.max_rel_error = std::max(rep.max_rel_error, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
  };
  for (int t = 0; t < n_probes; ++t) {
    for (double& v : x) v = unif(rng);
    for (double& v : u) v = unif(rng);
    const auto w = p.noise.atom(pick(rng));
    p.f_jacobian(x, u, w, fx, fu);
    p.g_gradient(x, u, gx, gu);
    rep.min_cost_seen = std::min(rep.min_cost_seen, p.g(x, u));

    // Perturb one input coordinate at a time; column j of the Jacobian.
    auto column = [&](std::vector<double>& var, std::size_t j, std::size_t ncols, const std::vector<double>& jac,
                      double grad_entry) {
      const double h = 1e-6 * std::max(1.0, std::abs(var[j]));
      const double keep = var[j];
      var[j] = keep + h;
      p.f(x, u, w, xp);
      const double gp = p.g(x, u);
      var[j] = keep - h;
      p.f(x, u, w, xm);
      const double gm = p.g(x, u);
      var[j] = keep;
      for (std::size_t i = 0; i < n; ++i) note(jac[i * ncols + j], (xp[i] - xm[i]) / (2.0 * h));
      note(grad_entry, (gp - gm) / (2.0 * h));
    };
    for (std::size_t j = 0; j < n; ++j) column(x, j, n, fx, gx[j]);
    for (std::size_t j = 0; j < m; ++j) column(u, j, m, fu, gu[j]);

    if (p.g_hessian) {
      p.g_hessian(x, u, hxx, hux, huu);
      detail::fd_cost_hessian(p, x, u, fxx, fux, fuu);
      for (std::size_t j = 0; j < n * n; ++j) note(hxx[j], fxx[j]);
      for (std::size_t j = 0; j < m * n; ++j) note(hux[j], fux[j]);
      for (std::size_t j = 0; j < m * m; ++j) note(huu[j], fuu[j]);
    }
    if (p.f_hessian) {
      for (double& v : lam) v = unif(rng);
      p.f_hessian(x, u, w, lam, hxx, hux, huu);
      detail::fd_dynamics_hessian(p, x, u, w, lam, fxx, fux, fuu);
      for (std::size_t j = 0; j < n * n; ++j) note(hxx[j], fxx[j]);
      for (std::size_t j = 0; j < m * n; ++j) note(hux[j], fux[j]);
      for (std::size_t j = 0; j < m * m; ++j) note(huu[j], fuu[j]);
    }
    ++rep.probes;
  }
  rep.passed = rep.max_rel_error <= threshold && rep.min_cost_seen >= p.g_lower_bound;
  return rep;
}

}  // namespace riskmpc

#endif  // RISKMPC_SYSMODEL_HPP
