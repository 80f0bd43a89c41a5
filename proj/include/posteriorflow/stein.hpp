#pragma once

// Kernelized Stein direction and discrepancy.

#include <cmath>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/kernels.hpp"
#include "posteriorflow/parallel.hpp"
#include "posteriorflow/targets.hpp"

namespace posteriorflow {

/// Row i is phi(theta_i); same layout as ParticleSet.
using SteinDirection = ParticleSet;

/// The two halves of the Stein direction: the kernel-weighted score average
/// (linear in the supplied gradients) and the kernel-gradient repulsion
/// (independent of them).
struct SteinTerms {
  SteinDirection drive;
  SteinDirection repulsion;
};

inline SteinTerms stein_terms(const ParticleSet& particles, const RbfKernel& kernel,
                              const ParticleSet& grads) {
  require(particles.rows() > 0, "stein_direction: no particles");
  require(grads.rows() == particles.rows() && grads.cols() == particles.cols(),
          "stein_direction: gradient matrix shape differs from particles");
  const auto m = particles.rows();
  const auto r = particles.cols();
  const double bw2 = kernel.squared_bandwidth();
  const double inv_m = 1.0 / static_cast<double>(m);
  SteinTerms out{SteinDirection(m, r), SteinDirection(m, r)};
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    Eigen::RowVectorXd drive = Eigen::RowVectorXd::Zero(r);
    Eigen::RowVectorXd repulsion = Eigen::RowVectorXd::Zero(r);
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::RowVectorXd diff = particles.row(j) - particles.row(i);
      const double k = std::exp(-diff.squaredNorm() / bw2);
      drive += k * grads.row(j);
      // grad wrt theta_j of k(theta_j, theta_i)
      repulsion += (-2.0 * k / bw2) * diff;
    }
    out.drive.row(i) = drive * inv_m;
    out.repulsion.row(i) = repulsion * inv_m;
  }, 8);
  return out;
}

/// phi(theta_i) = (1/M) sum_j [k(theta_j, theta_i) grads_j + grad_{theta_j} k(theta_j, theta_i)].
/// `grads` row j holds the (full or minibatch) log-posterior gradient at
/// particle j.
inline SteinDirection stein_direction(const ParticleSet& particles, const RbfKernel& kernel,
                                      const ParticleSet& grads) {
  SteinTerms t = stein_terms(particles, kernel, grads);
  t.drive += t.repulsion;
  return std::move(t.drive);
}

/// Stein kernel u(x, y) for the RBF kernel given scores s(x), s(y).
template <typename X, typename Y, typename SX, typename SY>
double stein_kernel(const RbfKernel& kernel, const Eigen::MatrixBase<X>& x,
                    const Eigen::MatrixBase<Y>& y, const Eigen::MatrixBase<SX>& sx,
                    const Eigen::MatrixBase<SY>& sy) {
  const double bw2 = kernel.squared_bandwidth();
  const auto r = static_cast<double>(x.size());
  const Eigen::RowVectorXd diff = x - y;
  const double d2 = diff.squaredNorm();
  const double k = std::exp(-d2 / bw2);
  // grad_x k = -(2/bw2) diff k, grad_y k = +(2/bw2) diff k
  const double score_term = sx.dot(sy) * k;
  const double cross_x = (2.0 * k / bw2) * sx.dot(diff);
  const double cross_y = (-2.0 * k / bw2) * sy.dot(diff);
  const double trace_term = k * (2.0 * r / bw2 - 4.0 * d2 / (bw2 * bw2));
  return score_term + cross_x + cross_y + trace_term;
}

/// Unbiased U-statistic (1 / (M (M - 1))) sum_{i != j} u(theta_i, theta_j). It
/// may be slightly negative near the target.
inline double ksd_u_statistic(const ParticleSet& particles, const TargetModel& model,
                              const RbfKernel& kernel) {
  const auto m = particles.rows();
  require(m >= 2, "ksd_u_statistic: need at least two particles");
  require(static_cast<std::size_t>(particles.cols()) == model.dimension(),
          "ksd_u_statistic: particle dimension differs from model");
  ParticleSet scores(m, particles.cols());
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    scores.row(i) = model.grad_log_posterior(particles.row(i).transpose()).transpose();
  });
  std::vector<double> row_sums(static_cast<std::size_t>(m), 0.0);
  parallel_for(static_cast<std::size_t>(m), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    double s = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i) continue;
      s += stein_kernel(kernel, particles.row(i), particles.row(j), scores.row(i),
                        scores.row(j));
    }
    row_sums[row] = s;
  }, 8);
  double total = 0.0;
  for (double s : row_sums) total += s;
  return total / (static_cast<double>(m) * static_cast<double>(m - 1));
}

}  // namespace posteriorflow
