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

#ifndef RISKMPC_ENSEMBLE_HPP
#define RISKMPC_ENSEMBLE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "riskmpc/error.hpp"

namespace riskmpc {

/**
 * A finite-support random variable over R^n: weighted atoms.
 *
 * Atoms are stored row-major in one flat buffer (atom i occupies
 * [i*dim, (i+1)*dim)). Probabilities are nonnegative and sum to one within
 * kProbabilityTolerance. Instances are immutable after construction.
 */
class Ensemble {
 public:
  static constexpr double kProbabilityTolerance = 1e-12;

  Ensemble(std::vector<double> atoms, std::vector<double> probs, std::size_t dim)
      : atoms_(std::move(atoms)), probs_(std::move(probs)), dim_(dim) {
    validate();
  }

  static Ensemble scalar(std::vector<double> values, std::vector<double> probs) {
    return Ensemble(std::move(values), std::move(probs), 1);
  }

  static Ensemble uniform(std::vector<double> values) {
    const std::size_t n = values.size();
    if (n == 0) throw InvalidArgument("Ensemble: at least one atom required");
    return Ensemble(std::move(values), std::vector<double>(n, 1.0 / static_cast<double>(n)), 1);
  }

  static Ensemble point_mass(std::vector<double> x) {
    const std::size_t d = x.size();
    return Ensemble(std::move(x), {1.0}, d);
  }

  static Ensemble point_mass(double x) { return Ensemble({x}, {1.0}, 1); }

  std::size_t size() const noexcept { return probs_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool is_scalar() const noexcept { return dim_ == 1; }

  std::span<const double> atom(std::size_t i) const {
    return {atoms_.data() + i * dim_, dim_};
  }
  double value(std::size_t i) const { return atoms_[i * dim_]; }
  double prob(std::size_t i) const { return probs_[i]; }

  const std::vector<double>& atoms() const noexcept { return atoms_; }
  const std::vector<double>& probs() const noexcept { return probs_; }

  // Translate every atom by m (scalar ensembles only).
  Ensemble shifted(double m) const {
    require_scalar("shifted");
    std::vector<double> v = atoms_;
    for (double& a : v) a += m;
    return Ensemble(std::move(v), probs_, 1);
  }

  Ensemble scaled(double beta) const {
    std::vector<double> v = atoms_;
    for (double& a : v) a *= beta;
    return Ensemble(std::move(v), probs_, dim_);
  }

  void require_scalar(const char* who) const {
    if (dim_ != 1) {
      throw InvalidArgument(std::string(who) + ": scalar ensemble required, got dimension " +
                            std::to_string(dim_));
    }
  }

 private:
  void validate() const {
    if (dim_ == 0) throw InvalidArgument("Ensemble: dimension must be positive");
    if (probs_.empty()) throw InvalidArgument("Ensemble: at least one atom required");
    if (atoms_.size() != probs_.size() * dim_) {
      throw InvalidArgument("Ensemble: atom buffer size " + std::to_string(atoms_.size()) +
                            " does not match " + std::to_string(probs_.size()) + " atoms of dimension " +
                            std::to_string(dim_));
    }
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("Ensemble: probabilities must be finite and >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > kProbabilityTolerance) {
      throw InvalidArgument("Ensemble: probabilities sum to " + std::to_string(total) + ", expected 1");
    }
  }

  std::vector<double> atoms_;
  std::vector<double> probs_;
  std::size_t dim_;
};

/// Two random variables on a common finite sample space: (x_i, y_i) occurs with probs_i.
class PairedEnsemble {
 public:
  PairedEnsemble(std::vector<double> atoms_x, std::vector<double> atoms_y, std::vector<double> probs,
                 std::size_t dim)
      : x_(atoms_x, probs, dim), y_(std::move(atoms_y), std::move(probs), dim) {}

  const Ensemble& x() const noexcept { return x_; }
  const Ensemble& y() const noexcept { return y_; }
  std::size_t size() const noexcept { return x_.size(); }

 private:
  Ensemble x_;
  Ensemble y_;
};

namespace detail {

inline double euclidean_norm(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline void require_positive_order(double r, const char* who) {
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw InvalidArgument(std::string(who) + ": order r must be a positive finite real");
  }
}

}  // namespace detail

inline std::vector<double> mean(const Ensemble& e) {
  std::vector<double> m(e.dim(), 0.0);
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto a = e.atom(i);
    for (std::size_t d = 0; d < e.dim(); ++d) m[d] += e.prob(i) * a[d];
  }
  return m;
}

inline double scalar_mean(const Ensemble& e) {
  e.require_scalar("scalar_mean");
  double m = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) m += e.prob(i) * e.value(i);
  return m;
}

/// | E[|X|^r]^(1/r) - E[|Y|^r]^(1/r) |
inline double moment_distance(const Ensemble& x, const Ensemble& y, double r) {
  detail::require_positive_order(r, "moment_distance");
  if (x.dim() != y.dim()) throw InvalidArgument("moment_distance: dimension mismatch");
  auto moment = [r](const Ensemble& e) {
    double s = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) s += e.prob(i) * std::pow(detail::euclidean_norm(e.atom(i)), r);
    return std::pow(s, 1.0 / r);
  };
  return std::abs(moment(x) - moment(y));
}

namespace detail {

inline std::vector<std::pair<double, double>> sorted_support(const Ensemble& e) {
  std::vector<std::pair<double, double>> s;
  s.reserve(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e.prob(i) > 0.0) s.emplace_back(e.value(i), e.prob(i));
  }
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace detail

/**
 * Order-r Wasserstein distance between two scalar ensembles.
 *
 * Uses the monotone (quantile) coupling, which is optimal in one dimension:
 * both sorted supports are walked together over common probability segments.
 */
inline double wasserstein_1d(const Ensemble& x, const Ensemble& y, double r) {
  detail::require_positive_order(r, "wasserstein_1d");
  x.require_scalar("wasserstein_1d");
  y.require_scalar("wasserstein_1d");
  const auto sx = detail::sorted_support(x);
  const auto sy = detail::sorted_support(y);
  std::size_t i = 0, j = 0;
  double rem_x = sx[0].second, rem_y = sy[0].second;
  double acc = 0.0;
  constexpr double kEps = 1e-15;
  while (i < sx.size() && j < sy.size()) {
    const double w = std::min(rem_x, rem_y);
    acc += w * std::pow(std::abs(sx[i].first - sy[j].first), r);
    rem_x -= w;
    rem_y -= w;
    if (rem_x <= kEps) {
      if (++i < sx.size()) rem_x = sx[i].second;
    }
    if (rem_y <= kEps) {
      if (++j < sy.size()) rem_y = sy[j].second;
    }
  }
  return std::pow(acc, 1.0 / r);
}

/**
 * Ky-Fan metric inf{eps > 0 : P(|X - Y| > eps) <= eps} of a coupled pair.
 *
 * The survival function of d = |X - Y| is a right-continuous step function,
 * so the infimum is found exactly by scanning the gaps between the sorted
 * distinct values of d.
 */
inline double ky_fan(const PairedEnsemble& p) {
  const std::size_t n = p.size();
  std::vector<std::pair<double, double>> d;
  d.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.emplace_back(detail::euclidean_distance(p.x().atom(i), p.y().atom(i)), p.x().prob(i));
  }
  std::sort(d.begin(), d.end());

  // Breakpoints 0 = b_0 < b_1 < ... (distinct positive d values); tail[j] = P(d >= b_{j+1}).
  std::vector<double> breaks{0.0};
  std::vector<double> mass_at{0.0};
  for (const auto& [v, w] : d) {
    if (v > breaks.back()) {
      breaks.push_back(v);
      mass_at.push_back(w);
    } else {
      mass_at.back() += w;
    }
  }
  double tail = 0.0;
  for (std::size_t j = 1; j < mass_at.size(); ++j) tail += mass_at[j];
  for (std::size_t j = 0; j < breaks.size(); ++j) {
    // On [b_j, b_{j+1}) the survival function equals `tail`.
    const double hi = (j + 1 < breaks.size()) ? breaks[j + 1] : std::numeric_limits<double>::infinity();
    const double candidate = std::max(breaks[j], tail);
    if (candidate < hi) return candidate;
    if (j + 1 < mass_at.size()) tail = std::max(0.0, tail - mass_at[j + 1]);
  }
  return breaks.back();
}

/// Merge atoms closer than tol in the max-norm; merged atoms sit at their probability-weighted mean.
inline Ensemble dedup(const Ensemble& e, double tol) {
  if (!(tol >= 0.0)) throw InvalidArgument("dedup: tol must be >= 0");
  const std::size_t n = e.size(), dim = e.dim();
  std::vector<double> out_atoms;
  std::vector<double> out_probs;

  auto close = [&](std::span<const double> a, std::span<const double> b) {
    for (std::size_t k = 0; k < dim; ++k) {
      if (std::abs(a[k] - b[k]) > tol) return false;
    }
    return true;
  };

  if (dim == 1) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return e.value(a) < e.value(b); });
    double anchor = 0.0, wsum = 0.0, psum = 0.0;
    bool open = false;
    for (std::size_t idx : order) {
      const double v = e.value(idx), p = e.prob(idx);
      if (open && std::abs(v - anchor) <= tol) {
        wsum += p * v;
        psum += p;
        anchor = v;
        continue;
      }
      if (open) {
        out_atoms.push_back(psum > 0.0 ? wsum / psum : anchor);
        out_probs.push_back(psum);
      }
      anchor = v;
      wsum = p * v;
      psum = p;
      open = true;
    }
    out_atoms.push_back(psum > 0.0 ? wsum / psum : anchor);
    out_probs.push_back(psum);
    return Ensemble(std::move(out_atoms), std::move(out_probs), 1);
  }

  std::vector<std::size_t> rep;  // representative source atom per cluster
  std::vector<double> wsums;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (; c < rep.size(); ++c) {
      if (close(e.atom(rep[c]), e.atom(i))) break;
    }
    if (c == rep.size()) {
      rep.push_back(i);
      out_probs.push_back(0.0);
      wsums.insert(wsums.end(), dim, 0.0);
    }
    out_probs[c] += e.prob(i);
    for (std::size_t k = 0; k < dim; ++k) wsums[c * dim + k] += e.prob(i) * e.atom(i)[k];
  }
  out_atoms.resize(rep.size() * dim);
  for (std::size_t c = 0; c < rep.size(); ++c) {
    for (std::size_t k = 0; k < dim; ++k) {
      out_atoms[c * dim + k] = out_probs[c] > 0.0 ? wsums[c * dim + k] / out_probs[c] : e.atom(rep[c])[k];
    }
  }
  return Ensemble(std::move(out_atoms), std::move(out_probs), dim);
}

}  // namespace riskmpc

#endif  // RISKMPC_ENSEMBLE_HPP
