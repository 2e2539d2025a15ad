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

#ifndef RISKMPC_NEWTON_HPP
#define RISKMPC_NEWTON_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/error.hpp"
#include "riskmpc/risk.hpp"
#include "riskmpc/sysmodel.hpp"
#include "riskmpc/tree.hpp"

namespace riskmpc {

struct NewtonResult {
  DecisionVector decision;  // native theta; KL theta_2 is optimized jointly
  double objective = 0.0;
  double grad_inf = 0.0;  // scaled, see TreeNewton
  int iterations = 0;
  bool converged = false;
};

/**
 * Damped Newton method for the tree OCP.
 *
 * Lifted stages keep every theta entry as a variable (for KL both theta_1
 * and theta_2), so each stage cost is a sum of node terms p_i Psi(g_i,
 * theta_k). The control block of the Hessian is factored by a Riccati
 * recursion on the tree with the adjoint-weighted dynamics curvature (exact
 * Newton in the sense of Dunn and Bertsekas); the few theta variables are
 * eliminated by a dense Schur complement built from one extra right-hand
 * side per theta entry. The KL theta_1 enters through s, theta_1 =
 * kKlThetaFloor + e^s. Indefinite or
 * poorly modeled steps are handled by Levenberg-Marquardt damping mu
 * (mu p_i on node i, mu on theta) with a ratio test on the nonlinear
 * rollout.
 *
 * Convergence uses the gradient with respect to sqrt(p_i) u_i and the theta
 * variables.
 */
class TreeNewton {
 public:
  TreeNewton(const Problem& p, const ScenarioTree& t, const Ensemble& x0, OcpCost cost)
      : p_(p), t_(t), x0_(x0), cost_(std::move(cost)) {
    p_.validate();
    cost_.validate();
    if (!cost_.differentiable()) {
      throw InvalidArgument(std::string("TreeNewton: ") + to_string(cost_.spec.kind) + " is not differentiable");
    }
    if (x0_.dim() != p_.state_dim || x0_.size() != t_.root_count) {
      throw InvalidArgument("TreeNewton: initial ensemble does not match the tree");
    }
    n_ = p_.state_dim;
    m_ = p_.control_dim;
    nc_ = t_.control_node_count();
    td_ = cost_.theta_dim();
    kl_ = cost_.lifted() && cost_.spec.kind == RiskKind::kKlDivergence;
    stage_phi_.assign(t_.horizon, -1);
    for (int k = 0; k < t_.horizon; ++k) {
      if (td_ > 0 && t_.level_size(k) > 1) {
        stage_phi_[k] = static_cast<long>(nphi_);
        nphi_ += td_;
      }
    }
    if (cost_.lifted()) {
      const RiskValue r0 = inner_minimize(cost_.spec, Ensemble::point_mass(0.0));
      rho0_ = r0.value;
    }
    nr_ = 1 + nphi_;
    const std::size_t mb = t_.branching, nn = t_.node_count();
    states_.assign(nn * n_, 0.0);
    costs_.assign(nc_, 0.0);
    lambda_.assign(nn * n_, 0.0);
    w_.assign(nc_, 0.0);
    d_.assign(nc_, 0.0);
    c_.assign(nc_ * std::max<std::size_t>(td_, 1), 0.0);
    grad_u_.assign(nc_ * m_, 0.0);
    gphi_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nphi_));
    hphi_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nphi_), static_cast<Eigen::Index>(nphi_));
    gx_.assign(nc_, Eigen::VectorXd::Zero(n_));
    gu_.assign(nc_, Eigen::VectorXd::Zero(m_));
    fx_.assign(nc_ * mb, Eigen::MatrixXd::Zero(n_, n_));
    fu_.assign(nc_ * mb, Eigen::MatrixXd::Zero(n_, m_));
    pmat_.assign(nn, Eigen::MatrixXd::Zero(n_, n_));
    svec_.assign(nn, Eigen::MatrixXd::Zero(n_, nr_));
    kgain_.assign(nc_, Eigen::MatrixXd::Zero(m_, n_));
    kff_.assign(nc_, Eigen::MatrixXd::Zero(m_, nr_));
    dx_.assign(nn, Eigen::MatrixXd::Zero(n_, nr_));
    du_.assign(nc_, Eigen::MatrixXd::Zero(m_, nr_));
  }

  NewtonResult run(const DecisionVector& start, int max_iter, double tol) {
    if (start.controls.size() != nc_ * m_ || start.thetas.size() != static_cast<std::size_t>(t_.horizon) * td_) {
      throw InvalidArgument("TreeNewton: start decision has the wrong size");
    }
    std::vector<double> u = start.controls;
    std::vector<double> phi(nphi_, 0.0);
    for (int k = 0; k < t_.horizon; ++k) {
      if (stage_phi_[k] < 0) continue;
      for (std::size_t j = 0; j < td_; ++j) phi[stage_phi_[k] + j] = start.thetas[k * td_ + j];
      if (kl_) {
        const double t = start.thetas[k * td_];
        if (!(t > 0.0)) throw InvalidArgument("TreeNewton: KL theta_1 must be > 0");
        phi[stage_phi_[k]] = kl_theta_to_s(t);
      }
    }
    double f = evaluate(u, phi);
    if (kl_ && std::isfinite(f)) {
      profile_kl(phi);
      f = evaluate(u, phi);
    }
    if (!std::isfinite(f)) throw SolverError("TreeNewton: objective is not finite at the start", u, f);

    NewtonResult res;
    double mu = 0.0;
    std::vector<double> du(nc_ * m_), dphi(nphi_), ut(nc_ * m_), phit(nphi_);
    for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
      evaluate(u, phi);  // states at the accepted point
      derivatives(u, phi);
      res.grad_inf = scaled_grad_inf();
      if (res.grad_inf <= tol) {
        res.converged = true;
        break;
      }
      // Levenberg-Marquardt: accept the full step when the actual decrease
      // is a fair fraction of the model decrease, otherwise raise mu.
      bool stepped = false;
      while (mu <= 1e14) {
        double slope = 0.0, damp = 0.0;
        const bool ok = direction(u, mu, du, dphi, slope, damp);
        if (!ok || !(slope < 0.0)) {
          mu = std::max(1e-6, 10.0 * mu);
          continue;
        }
        // Model decrease of the undamped quadratic along the step.
        const double model = 0.5 * slope - 0.5 * mu * damp;
        for (std::size_t i = 0; i < ut.size(); ++i) ut[i] = u[i] + du[i];
        for (std::size_t j = 0; j < nphi_; ++j) phit[j] = phi[j] + dphi[j];
        const double ft = evaluate(ut, phit);
        const double ratio = (ft - f) / model;
        if (std::isfinite(ft) && ft <= f && ratio >= 0.1) {
          u.swap(ut);
          phi.swap(phit);
          f = ft;
          if (kl_) {
            // Exact minimization over theta_2 never increases f.
            profile_kl(phi);
            f = evaluate(u, phi);
          }
          if (ratio > 0.75) mu = mu / 4.0 < 1e-10 ? 0.0 : mu / 4.0;
          stepped = true;
          break;
        }
        // Decrease below round-off: the iterate is as good as f can tell.
        if (std::abs(slope) <= 1e-14 * std::max(1.0, std::abs(f))) break;
        mu = std::max(1e-6, 10.0 * mu);
      }
      if (!stepped) break;
    }
    res.objective = evaluate(u, phi);
    res.decision.controls = u;
    res.decision.thetas = start.thetas;
    for (int k = 0; k < t_.horizon; ++k) {
      if (stage_phi_[k] < 0) continue;
      const auto th = native(phi, k);
      for (std::size_t j = 0; j < td_; ++j) res.decision.thetas[k * td_ + j] = th[j];
    }
    return res;
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  // Native theta of stage k; the KL variable is s = log theta_1.
  std::array<double, 2> native(const std::vector<double>& phi, int k) const {
    std::array<double, 2> th{0.0, 0.0};
    for (std::size_t j = 0; j < td_; ++j) th[j] = phi[stage_phi_[k] + j];
    if (kl_) th[0] = kl_s_to_theta(th[0]);
    return th;
  }

  // Objective; fills states_ and costs_. +inf on any non-finite value.
  double evaluate(const std::vector<double>& u, const std::vector<double>& phi) {
    for (std::size_t r = 0; r < t_.root_count; ++r) {
      for (std::size_t j = 0; j < n_; ++j) states_[r * n_ + j] = x0_.atom(r)[j];
    }
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nc_; ++i) {
      const std::span<const double> x(&states_[i * n_], n_), ui(&u[i * m_], m_);
      costs_[i] = p_.g(x, ui);
      if (!std::isfinite(costs_[i])) return inf;
      if (t_.depth[i] + 1 == t_.horizon) continue;
      for (std::size_t b = 0; b < t_.branching; ++b) {
        std::span<double> xn(&states_[t_.child(i, b) * n_], n_);
        p_.f(x, ui, t_.noise.atom(b), xn);
        for (double v : xn) {
          if (!std::isfinite(v)) return inf;
        }
      }
    }
    const RiskSpec& spec = cost_.spec;
    double total = 0.0;
    for (int k = 0; k < t_.horizon; ++k) {
      const std::size_t b = t_.level_begin(k), e = t_.level_end(k);
      double v = 0.0;
      if (spec.kind == RiskKind::kExpectation) {
        for (std::size_t i = b; i < e; ++i) v += t_.prob[i] * costs_[i];
      } else if (cost_.mode == CostMode::kFixedTheta) {
        for (std::size_t i = b; i < e; ++i) v += t_.prob[i] * psi(spec, costs_[i], cost_.theta);
      } else if (stage_phi_[k] < 0) {
        v = costs_[b] + rho0_;
      } else {
        const auto th = native(phi, k);
        if (kl_ && !(th[0] > 0.0)) return inf;
        const std::span<const double> ths(th.data(), td_);
        for (std::size_t i = b; i < e; ++i) v += t_.prob[i] * psi(spec, costs_[i], ths);
      }
      if (!std::isfinite(v)) return inf;
      total += v;
    }
    return total;
  }

  // theta_2 = t log E[exp(g / t)], the exact minimizer for the current theta_1.
  void profile_kl(std::vector<double>& phi) const {
    for (int k = 0; k < t_.horizon; ++k) {
      if (stage_phi_[k] < 0) continue;
      const std::size_t b = t_.level_begin(k), e = t_.level_end(k);
      const double t = kl_s_to_theta(phi[stage_phi_[k]]);
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t i = b; i < e; ++i) {
        if (t_.prob[i] > 0.0) zmax = std::max(zmax, costs_[i]);
      }
      double s = 0.0;
      for (std::size_t i = b; i < e; ++i) s += t_.prob[i] * std::exp((costs_[i] - zmax) / t);
      phi[stage_phi_[k] + 1] = zmax + t * std::log(s);
    }
  }

  // Node weights, curvature, theta couplings, adjoints and the gradient.
  void derivatives(const std::vector<double>& u, const std::vector<double>& phi) {
    const RiskSpec& spec = cost_.spec;
    gphi_.setZero();
    hphi_.setZero();
    for (int k = 0; k < t_.horizon; ++k) {
      const std::size_t b = t_.level_begin(k), e = t_.level_end(k);
      for (std::size_t i = b; i < e; ++i) {
        const double pi = t_.prob[i];
        if (spec.kind == RiskKind::kExpectation) {
          w_[i] = pi;
          d_[i] = 0.0;
        } else if (cost_.mode == CostMode::kFixedTheta) {
          const PsiEval pe = psi_eval(spec, costs_[i], cost_.theta);
          w_[i] = pi * pe.dz;
          d_[i] = pi * pe.dzz;
        } else if (stage_phi_[k] < 0) {
          w_[i] = 1.0;
          d_[i] = 0.0;
        } else {
          const long off = stage_phi_[k];
          const auto th = native(phi, k);
          PsiEval pe = psi_eval(spec, costs_[i], std::span<const double>(th.data(), td_));
          if (kl_) {
            // Chain rule for theta_1 = floor + e^s.
            const double t = th[0] - kKlThetaFloor;
            pe.dtheta2[0] = t * t * pe.dtheta2[0] + t * pe.dtheta[0];
            pe.dtheta2[1] *= t;
            pe.dz_dtheta[0] *= t;
            pe.dtheta[0] *= t;
          }
          w_[i] = pi * pe.dz;
          d_[i] = pi * pe.dzz;
          for (std::size_t j = 0; j < td_; ++j) {
            c_[i * td_ + j] = pi * pe.dz_dtheta[j];
            gphi_[off + j] += pi * pe.dtheta[j];
            for (std::size_t l = 0; l < td_; ++l) hphi_(off + j, off + l) += pi * pe.dtheta2[j + l];
          }
        }
      }
    }

    std::vector<double> gx(n_), gu(m_), fx(n_ * n_), fu(n_ * m_);
    std::fill(lambda_.begin(), lambda_.end(), 0.0);
    for (std::size_t i = nc_; i-- > 0;) {
      const std::span<const double> x(&states_[i * n_], n_), ui(&u[i * m_], m_);
      p_.g_gradient(x, ui, gx, gu);
      gx_[i] = Eigen::Map<const Eigen::VectorXd>(gx.data(), n_);
      gu_[i] = Eigen::Map<const Eigen::VectorXd>(gu.data(), m_);
      double* lam = &lambda_[i * n_];
      double* gi = &grad_u_[i * m_];
      for (std::size_t j = 0; j < n_; ++j) lam[j] = w_[i] * gx[j];
      for (std::size_t j = 0; j < m_; ++j) gi[j] = w_[i] * gu[j];
      if (t_.depth[i] + 1 == t_.horizon) continue;
      for (std::size_t b = 0; b < t_.branching; ++b) {
        p_.f_jacobian(x, ui, t_.noise.atom(b), fx, fu);
        Eigen::MatrixXd& Fx = fx_[i * t_.branching + b];
        Eigen::MatrixXd& Fu = fu_[i * t_.branching + b];
        Fx = Eigen::Map<const RowMat>(fx.data(), n_, n_);
        Fu = Eigen::Map<const RowMat>(fu.data(), n_, m_);
        const Eigen::Map<const Eigen::VectorXd> lc(&lambda_[t_.child(i, b) * n_], n_);
        Eigen::Map<Eigen::VectorXd>(lam, n_) += Fx.transpose() * lc;
        Eigen::Map<Eigen::VectorXd>(gi, m_) += Fu.transpose() * lc;
      }
    }
  }

  double scaled_grad_inf() const {
    double gm = 0.0;
    for (std::size_t i = 0; i < nc_; ++i) {
      const double s = t_.prob[i] > 0.0 ? std::sqrt(t_.prob[i]) : 1.0;
      for (std::size_t j = 0; j < m_; ++j) gm = std::max(gm, std::abs(grad_u_[i * m_ + j]) / s);
    }
    return nphi_ > 0 ? std::max(gm, gphi_.cwiseAbs().maxCoeff()) : gm;
  }

  // Column 0: node gradient; column 1 + a: coupling of theta entry a.
  void node_rhs(std::size_t i, Eigen::MatrixXd& rx, Eigen::MatrixXd& ru) const {
    rx.setZero(n_, nr_);
    ru.setZero(m_, nr_);
    rx.col(0) = w_[i] * gx_[i];
    ru.col(0) = w_[i] * gu_[i];
    const long off = stage_phi_[t_.depth[i]];
    if (off < 0 || cost_.mode != CostMode::kRisk) return;
    for (std::size_t j = 0; j < td_; ++j) {
      rx.col(1 + off + j) = c_[i * td_ + j] * gx_[i];
      ru.col(1 + off + j) = c_[i * td_ + j] * gu_[i];
    }
  }

  // Damped Newton direction; false if a pivot is not positive definite.
  // damp receives the squared step norm in the damping metric.
  bool direction(const std::vector<double>& u, double mu, std::vector<double>& du, std::vector<double>& dphi,
                 double& slope, double& damp) {
    std::vector<double> gxx(n_ * n_), gux(m_ * n_), guu(m_ * m_), hxx(n_ * n_), hux(m_ * n_), huu(m_ * m_);
    Eigen::MatrixXd axx(n_, n_), aux(m_, n_), auu(m_, m_), qx, qu;
    const std::size_t mb = t_.branching;
    for (std::size_t c = nc_; c < t_.node_count(); ++c) {
      pmat_[c].setZero();
      svec_[c].setZero();
    }
    for (std::size_t i = nc_; i-- > 0;) {
      const std::span<const double> x(&states_[i * n_], n_), ui(&u[i * m_], m_);
      cost_hessian(p_, x, ui, gxx, gux, guu);
      axx = w_[i] * Eigen::Map<const RowMat>(gxx.data(), n_, n_) + d_[i] * gx_[i] * gx_[i].transpose();
      aux = w_[i] * Eigen::Map<const RowMat>(gux.data(), m_, n_) + d_[i] * gu_[i] * gx_[i].transpose();
      auu = w_[i] * Eigen::Map<const RowMat>(guu.data(), m_, m_) + d_[i] * gu_[i] * gu_[i].transpose();
      node_rhs(i, qx, qu);
      if (t_.depth[i] + 1 < t_.horizon) {
        for (std::size_t b = 0; b < mb; ++b) {
          const std::size_t ch = t_.child(i, b);
          dynamics_hessian(p_, x, ui, t_.noise.atom(b), std::span<const double>(&lambda_[ch * n_], n_), hxx, hux,
                           huu);
          const Eigen::MatrixXd& Fx = fx_[i * mb + b];
          const Eigen::MatrixXd& Fu = fu_[i * mb + b];
          const Eigen::MatrixXd PFx = pmat_[ch] * Fx, PFu = pmat_[ch] * Fu;
          axx += Eigen::Map<const RowMat>(hxx.data(), n_, n_) + Fx.transpose() * PFx;
          aux += Eigen::Map<const RowMat>(hux.data(), m_, n_) + Fu.transpose() * PFx;
          auu += Eigen::Map<const RowMat>(huu.data(), m_, m_) + Fu.transpose() * PFu;
          qx += Fx.transpose() * svec_[ch];
          qu += Fu.transpose() * svec_[ch];
        }
      }
      auu = 0.5 * (auu + auu.transpose()).eval();
      auu.diagonal().array() += mu * t_.prob[i];
      const Eigen::LLT<Eigen::MatrixXd> llt(auu);
      if (llt.info() != Eigen::Success) return false;
      const double scale = std::max(1e-300, auu.diagonal().cwiseAbs().maxCoeff());
      if (llt.matrixLLT().diagonal().array().square().minCoeff() <= 1e-13 * scale) return false;
      kgain_[i] = -llt.solve(aux);
      kff_[i] = -llt.solve(qu);
      pmat_[i] = axx + aux.transpose() * kgain_[i];
      pmat_[i] = 0.5 * (pmat_[i] + pmat_[i].transpose()).eval();
      svec_[i] = qx + aux.transpose() * kff_[i];
    }

    // Forward substitution for every right-hand side, then theta couplings.
    Eigen::MatrixXd coupling = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nphi_), nr_);
    for (std::size_t r = 0; r < t_.root_count; ++r) dx_[r].setZero();
    for (std::size_t i = 0; i < nc_; ++i) {
      du_[i] = kff_[i] + kgain_[i] * dx_[i];
      const long off = stage_phi_[t_.depth[i]];
      if (off >= 0) {
        const Eigen::RowVectorXd lin = gx_[i].transpose() * dx_[i] + gu_[i].transpose() * du_[i];
        for (std::size_t j = 0; j < td_; ++j) coupling.row(off + j) += c_[i * td_ + j] * lin;
      }
      if (t_.depth[i] + 1 == t_.horizon) continue;
      for (std::size_t b = 0; b < mb; ++b) {
        dx_[t_.child(i, b)] = fx_[i * mb + b] * dx_[i] + fu_[i * mb + b] * du_[i];
      }
    }

    Eigen::VectorXd step_phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nphi_));
    if (nphi_ > 0) {
      Eigen::MatrixXd schur = hphi_ + coupling.rightCols(static_cast<Eigen::Index>(nphi_));
      schur = 0.5 * (schur + schur.transpose()).eval();
      schur.diagonal().array() += mu;
      const Eigen::LLT<Eigen::MatrixXd> llt(schur);
      if (llt.info() != Eigen::Success) return false;
      const double scale = std::max(1e-300, schur.diagonal().cwiseAbs().maxCoeff());
      if (llt.matrixLLT().diagonal().array().square().minCoeff() <= 1e-13 * scale) return false;
      step_phi = llt.solve(-gphi_ - coupling.col(0));
    }
    slope = 0.0;
    damp = 0.0;
    for (std::size_t i = 0; i < nc_; ++i) {
      Eigen::VectorXd d = du_[i].col(0);
      if (nphi_ > 0) d += du_[i].rightCols(static_cast<Eigen::Index>(nphi_)) * step_phi;
      for (std::size_t j = 0; j < m_; ++j) {
        du[i * m_ + j] = d[static_cast<Eigen::Index>(j)];
        slope += grad_u_[i * m_ + j] * du[i * m_ + j];
        damp += t_.prob[i] * du[i * m_ + j] * du[i * m_ + j];
      }
    }
    for (std::size_t a = 0; a < nphi_; ++a) {
      dphi[a] = step_phi[static_cast<Eigen::Index>(a)];
      slope += gphi_[static_cast<Eigen::Index>(a)] * dphi[a];
      damp += dphi[a] * dphi[a];
    }
    for (double v : du) {
      if (!std::isfinite(v)) return false;
    }
    for (double v : dphi) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  const Problem& p_;
  const ScenarioTree& t_;
  Ensemble x0_;  // copied: callers often pass temporaries
  OcpCost cost_;
  std::size_t n_ = 0, m_ = 0, nc_ = 0, td_ = 0, nphi_ = 0;
  Eigen::Index nr_ = 1;
  bool kl_ = false;
  double rho0_ = 0.0;
  std::vector<long> stage_phi_;  // offset of the stage's theta, -1 if none
  std::vector<double> states_, costs_, lambda_, w_, d_, c_, grad_u_;
  Eigen::VectorXd gphi_;
  Eigen::MatrixXd hphi_;
  std::vector<Eigen::VectorXd> gx_, gu_;
  std::vector<Eigen::MatrixXd> fx_, fu_, pmat_, svec_, kgain_, kff_, dx_, du_;
};

}  // namespace riskmpc

#endif  // RISKMPC_NEWTON_HPP
