#pragma once

// Particle-approximation metrics: the identity-coupling quadratic W2
// surrogate, exact 1-D W2, discrete KL / JSD, MMD and moment errors.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/kernels.hpp"
#include "posteriorflow/parallel.hpp"

namespace posteriorflow {

/// Probability vector over a finite alphabet.
class DiscreteDist {
 public:
  explicit DiscreteDist(std::vector<double> p) : p_(std::move(p)) {
    require(!p_.empty(), "DiscreteDist: empty alphabet");
    double total = 0.0;
    for (double v : p_) {
      require(std::isfinite(v) && v >= 0.0, "DiscreteDist: entries must be finite and >= 0");
      total += v;
    }
    require(std::abs(total - 1.0) <= 1e-12, "DiscreteDist: entries must sum to 1");
  }

  /// Normalizes nonnegative weights.
  static DiscreteDist from_weights(std::vector<double> w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    require(total > 0.0, "DiscreteDist: weights sum to zero");
    for (double& v : w) v /= total;
    // Push the rounding residue into the largest entry.
    const double residue = 1.0 - std::accumulate(w.begin(), w.end(), 0.0);
    *std::max_element(w.begin(), w.end()) += residue;
    return DiscreteDist(std::move(w));
  }

  std::size_t size() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  const std::vector<double>& values() const { return p_; }

 private:
  std::vector<double> p_;
};

/// (1/M) sum_i |cur_i - prev_i|^2: W2^2 under the identity coupling that pairs
/// particle i across two iterations. With psi restricted to quadratics this is
/// what the dual W2 objective reduces to, and it upper-bounds the true W2^2.
inline double w2_quadratic(const ParticleSet& prev, const ParticleSet& cur) {
  require(prev.rows() == cur.rows() && prev.cols() == cur.cols(),
          "w2_quadratic: particle sets differ in shape");
  require(prev.rows() > 0, "w2_quadratic: empty particle sets");
  double total = 0.0;
  for (Eigen::Index i = 0; i < prev.rows(); ++i) {
    total += (cur.row(i) - prev.row(i)).squaredNorm();
  }
  return total / static_cast<double>(prev.rows());
}

/// Exact W2^2 between two equal-size 1-D empirical measures (sorted coupling).
inline double w2_sorted_1d(std::vector<double> a, std::vector<double> b) {
  require(a.size() == b.size() && !a.empty(), "w2_sorted_1d: sizes must match");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

inline double w2_sorted_1d(const ParticleSet& prev, const ParticleSet& cur) {
  require(prev.cols() == 1 && cur.cols() == 1, "w2_sorted_1d: particles must be 1-D");
  return w2_sorted_1d(std::vector<double>(prev.data(), prev.data() + prev.size()),
                      std::vector<double>(cur.data(), cur.data() + cur.size()));
}

/// KL(p1 || p2) in nats; +infinity when p1 puts mass where p2 has none.
inline double kl_discrete(const DiscreteDist& p1, const DiscreteDist& p2) {
  require(p1.size() == p2.size(), "kl_discrete: alphabets differ");
  double kl = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    if (p1[i] == 0.0) continue;
    if (p2[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p1[i] * std::log(p1[i] / p2[i]);
  }
  return kl;
}

/// Jensen-Shannon divergence in bits, in [0, 1].
inline double jsd_discrete(const DiscreteDist& p1, const DiscreteDist& p2) {
  require(p1.size() == p2.size(), "jsd_discrete: alphabets differ");
  double total = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    const double m = 0.5 * (p1[i] + p2[i]);
    if (p1[i] > 0.0) total += 0.5 * p1[i] * std::log2(p1[i] / m);
    if (p2[i] > 0.0) total += 0.5 * p2[i] * std::log2(p2[i] / m);
  }
  return total;
}

namespace detail {

inline double kernel_block_sum(const ParticleSet& a, const ParticleSet& b,
                               const RbfKernel& kernel, bool skip_diagonal) {
  std::vector<double> rows(static_cast<std::size_t>(a.rows()), 0.0);
  const double bw2 = kernel.squared_bandwidth();
  parallel_for(static_cast<std::size_t>(a.rows()), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    double s = 0.0;
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      if (skip_diagonal && i == j) continue;
      s += std::exp(-(a.row(i) - b.row(j)).squaredNorm() / bw2);
    }
    rows[row] = s;
  }, 64);
  double total = 0.0;
  for (double s : rows) total += s;
  return total;
}

}  // namespace detail

/// Unbiased U-statistic estimate of MMD^2 between two sample sets.
inline double mmd_squared(const ParticleSet& a, const ParticleSet& b, const RbfKernel& kernel) {
  require(a.rows() >= 2 && b.rows() >= 2, "mmd_squared: each set needs at least two points");
  require(a.cols() == b.cols(), "mmd_squared: dimension mismatch");
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  const double kaa = detail::kernel_block_sum(a, a, kernel, true) / (m * (m - 1.0));
  const double kbb = detail::kernel_block_sum(b, b, kernel, true) / (n * (n - 1.0));
  const double kab = detail::kernel_block_sum(a, b, kernel, false) / (m * n);
  return kaa + kbb - 2.0 * kab;
}

/// Biased V-statistic MMD^2 (diagonal included); exactly 0 for identical sets.
inline double mmd_squared_v(const ParticleSet& a, const ParticleSet& b, const RbfKernel& kernel) {
  require(a.rows() >= 1 && b.rows() >= 1, "mmd_squared_v: empty sample set");
  require(a.cols() == b.cols(), "mmd_squared_v: dimension mismatch");
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  const double kaa = detail::kernel_block_sum(a, a, kernel, false) / (m * m);
  const double kbb = detail::kernel_block_sum(b, b, kernel, false) / (n * n);
  const double kab = detail::kernel_block_sum(a, b, kernel, false) / (m * n);
  return kaa + kbb - 2.0 * kab;
}

struct MomentErrors {
  double mean_error;
  double cov_error;  // NaN when fewer than two particles
};

/// Euclidean norm of the mean error and Frobenius norm of the (unbiased)
/// covariance error.
inline MomentErrors moment_errors(const ParticleSet& particles, const Vector& true_mean,
                                  const Matrix& true_cov) {
  const auto m = particles.rows();
  const auto r = particles.cols();
  require(m >= 1, "moment_errors: no particles");
  require(true_mean.size() == r && true_cov.rows() == r && true_cov.cols() == r,
          "moment_errors: reference moments have the wrong dimension");
  const Vector mean = particles.colwise().mean().transpose();
  const double mean_error = (mean - true_mean).norm();
  if (m < 2) return {mean_error, std::numeric_limits<double>::quiet_NaN()};
  const Matrix centered = particles.rowwise() - mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(m - 1);
  return {mean_error, (cov - true_cov).norm()};
}

}  // namespace posteriorflow
