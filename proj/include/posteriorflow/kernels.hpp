#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/parallel.hpp"

namespace posteriorflow {

/// k(x, y) = exp(-|x - y|^2 / bw2).
class RbfKernel {
 public:
  explicit RbfKernel(double squared_bandwidth = 1.0) : bw2_(squared_bandwidth) {
    require(std::isfinite(bw2_) && bw2_ > 0.0, "RbfKernel: bandwidth must be positive");
  }

  double squared_bandwidth() const { return bw2_; }

  template <typename A, typename B>
  double operator()(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) const {
    return std::exp(-difference(x, y).squaredNorm() / bw2_);
  }

  /// grad_x k(x, y) = -(2 / bw2) (x - y) k(x, y), as a column vector.
  template <typename A, typename B>
  Vector grad_x(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) const {
    Vector diff = difference(x, y);
    const double k = std::exp(-diff.squaredNorm() / bw2_);
    diff *= -2.0 * k / bw2_;
    return diff;
  }

 private:
  // Accepts row or column vectors on either side.
  template <typename A, typename B>
  static Vector difference(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) {
    require(x.size() == y.size(), "RbfKernel: dimension mismatch");
    Vector d(x.size());
    for (Eigen::Index t = 0; t < x.size(); ++t) d[t] = x.coeff(t) - y.coeff(t);
    return d;
  }

  double bw2_;
};

template <typename A, typename B>
double rbf_eval(const RbfKernel& kernel, const Eigen::MatrixBase<A>& x,
                const Eigen::MatrixBase<B>& y) {
  return kernel(x, y);
}

template <typename A, typename B>
Vector rbf_grad_x(const RbfKernel& kernel, const Eigen::MatrixBase<A>& x,
                  const Eigen::MatrixBase<B>& y) {
  return kernel.grad_x(x, y);
}

/// Squared bandwidth med^2 / log(M + 1) where med is the median Euclidean
/// distance over distinct particle pairs (lower-middle element for an even
/// pair count). Returns 1.0 for a single particle or coincident particles.
inline double median_heuristic(const ParticleSet& particles) {
  const auto m = particles.rows();
  if (m < 2) return 1.0;
  std::vector<double> dist2;
  dist2.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i + 1; j < m; ++j) {
      dist2.push_back((particles.row(i) - particles.row(j)).squaredNorm());
    }
  }
  const auto mid = dist2.begin() + static_cast<std::ptrdiff_t>((dist2.size() - 1) / 2);
  std::nth_element(dist2.begin(), mid, dist2.end());
  const double med2 = *mid;
  if (!(med2 > 0.0)) return 1.0;
  return med2 / std::log(static_cast<double>(m) + 1.0);
}

/// Gram matrix K_ij = k(theta_i, theta_j).
inline Matrix gram_matrix(const ParticleSet& particles, const RbfKernel& kernel) {
  const auto m = particles.rows();
  Matrix k(m, m);
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    for (Eigen::Index j = 0; j < m; ++j) {
      k(i, j) = std::exp(-(particles.row(i) - particles.row(j)).squaredNorm() /
                         kernel.squared_bandwidth());
    }
  });
  return k;
}

}  // namespace posteriorflow
