#pragma once

// Target posteriors: unnormalized log-density, full gradient and minibatch
// gradient. Every model documents which theta-independent constants it drops
// from the potential energy U; only gradients and differences of U are
// meaningful across models.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/dataset.hpp"

namespace posteriorflow {

using ConstVectorRef = Eigen::Ref<const Vector>;
using BatchIndices = std::span<const std::size_t>;

/// Isotropic Gaussian used to seed particles from a model's prior.
struct GaussianPrior {
  Vector mean;
  double stddev = 1.0;
};

/// Differentiable unnormalized log-density. Evaluation is const and safe to
/// call concurrently.
class TargetModel {
 public:
  virtual ~TargetModel() = default;

  virtual std::size_t dimension() const = 0;
  /// Number of data points behind the likelihood; 0 for analytic targets.
  virtual std::size_t dataset_size() const { return 0; }
  virtual std::string name() const = 0;
  virtual std::optional<GaussianPrior> prior() const { return std::nullopt; }

  /// U(theta) under the model's constant convention.
  double potential_energy(ConstVectorRef theta) const {
    check_dimension(theta);
    return do_potential(theta);
  }

  double log_unnorm_density(ConstVectorRef theta) const {
    return -potential_energy(theta);
  }

  /// grad log p(theta | X) = -grad U(theta).
  Vector grad_log_posterior(ConstVectorRef theta) const {
    check_dimension(theta);
    Vector g = do_grad(theta);
    check_finite(g);
    return g;
  }

  /// grad log p(theta) + (N/n) sum_{i in batch} grad log p(x_i | theta).
  /// Analytic targets ignore the batch.
  Vector stochastic_grad(ConstVectorRef theta, BatchIndices batch) const {
    check_dimension(theta);
    if (dataset_size() == 0) return grad_log_posterior(theta);
    require(!batch.empty(), "stochastic_grad: empty batch");
    for (std::size_t i : batch) {
      require(i < dataset_size(), "stochastic_grad: batch index out of range");
    }
    Vector g = do_stochastic_grad(theta, batch);
    check_finite(g);
    return g;
  }

 protected:
  virtual double do_potential(ConstVectorRef theta) const = 0;
  virtual Vector do_grad(ConstVectorRef theta) const = 0;
  virtual Vector do_stochastic_grad(ConstVectorRef theta, BatchIndices) const {
    return do_grad(theta);
  }

 private:
  void check_dimension(ConstVectorRef theta) const {
    require(static_cast<std::size_t>(theta.size()) == dimension(),
            name() + ": parameter has dimension " + std::to_string(theta.size()) +
                ", expected " + std::to_string(dimension()));
  }

  void check_finite(const Vector& g) const {
    if (!g.allFinite()) {
      throw NumericOverflow(name() + ": non-finite gradient; reduce the stepsize");
    }
  }
};

/// N(mean, precision^{-1}). U = (theta - mean)^T P (theta - mean) / 2; the
/// log-determinant and 2*pi terms are dropped.
class GaussianTarget final : public TargetModel {
 public:
  GaussianTarget(Vector mean, Matrix precision)
      : mean_(std::move(mean)), precision_(std::move(precision)) {
    require(mean_.size() > 0, "GaussianTarget: empty mean");
    require(precision_.rows() == mean_.size() && precision_.cols() == mean_.size(),
            "GaussianTarget: precision shape mismatch");
    require(precision_.isApprox(precision_.transpose()),
            "GaussianTarget: precision must be symmetric");
    Eigen::LLT<Matrix> llt(precision_);
    require(llt.info() == Eigen::Success,
            "GaussianTarget: precision must be positive definite");
    covariance_ = llt.solve(Matrix::Identity(mean_.size(), mean_.size()));
  }

  static GaussianTarget standard(std::size_t r) {
    const auto n = static_cast<Eigen::Index>(r);
    return GaussianTarget(Vector::Zero(n), Matrix::Identity(n, n));
  }

  static GaussianTarget isotropic(Vector mean, double variance) {
    require(variance > 0.0, "GaussianTarget: variance must be positive");
    const auto n = mean.size();
    return GaussianTarget(std::move(mean), Matrix::Identity(n, n) / variance);
  }

  std::size_t dimension() const override { return static_cast<std::size_t>(mean_.size()); }
  std::string name() const override { return "gaussian"; }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return covariance_; }

 protected:
  double do_potential(ConstVectorRef theta) const override {
    const Vector d = theta - mean_;
    return 0.5 * d.dot(precision_ * d);
  }
  Vector do_grad(ConstVectorRef theta) const override {
    return -(precision_ * (theta - mean_));
  }

 private:
  Vector mean_;
  Matrix precision_;
  Matrix covariance_;
};

/// Mixture of isotropic Gaussians sum_k w_k N(m_k, s_k^2 I).
/// U = -log sum_k w_k s_k^{-r} exp(-|theta - m_k|^2 / (2 s_k^2)); the
/// (2 pi)^{r/2} factor is dropped.
class GaussianMixtureTarget final : public TargetModel {
 public:
  struct Component {
    double weight;
    Vector mean;
    double stddev;
  };

  explicit GaussianMixtureTarget(std::vector<Component> components)
      : components_(std::move(components)) {
    require(!components_.empty(), "GaussianMixtureTarget: no components");
    const auto r = components_.front().mean.size();
    require(r > 0, "GaussianMixtureTarget: empty mean");
    double total = 0.0;
    for (const auto& c : components_) {
      require(c.mean.size() == r, "GaussianMixtureTarget: component dimensions differ");
      require(c.weight > 0.0 && c.stddev > 0.0,
              "GaussianMixtureTarget: weights and stddevs must be positive");
      total += c.weight;
    }
    for (auto& c : components_) c.weight /= total;
  }

  /// Equal-weight pair at +-offset along every axis with unit variance.
  static GaussianMixtureTarget symmetric_pair(std::size_t r, double offset) {
    const auto n = static_cast<Eigen::Index>(r);
    return GaussianMixtureTarget({{0.5, Vector::Constant(n, offset), 1.0},
                                  {0.5, Vector::Constant(n, -offset), 1.0}});
  }

  std::size_t dimension() const override {
    return static_cast<std::size_t>(components_.front().mean.size());
  }
  std::string name() const override { return "mixture"; }
  const std::vector<Component>& components() const { return components_; }

  Vector mean() const {
    Vector m = Vector::Zero(components_.front().mean.size());
    for (const auto& c : components_) m += c.weight * c.mean;
    return m;
  }

  Matrix covariance() const {
    const auto r = components_.front().mean.size();
    const Vector m = mean();
    Matrix cov = Matrix::Zero(r, r);
    for (const auto& c : components_) {
      const Vector d = c.mean - m;
      cov += c.weight * (c.stddev * c.stddev * Matrix::Identity(r, r) + d * d.transpose());
    }
    return cov;
  }

 protected:
  double do_potential(ConstVectorRef theta) const override {
    const std::vector<double> logs = component_logs(theta);
    const double top = *std::max_element(logs.begin(), logs.end());
    double sum = 0.0;
    for (double l : logs) sum += std::exp(l - top);
    return -(top + std::log(sum));
  }

  Vector do_grad(ConstVectorRef theta) const override {
    const std::vector<double> logs = component_logs(theta);
    const double top = *std::max_element(logs.begin(), logs.end());
    double sum = 0.0;
    for (double l : logs) sum += std::exp(l - top);
    Vector g = Vector::Zero(theta.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const double resp = std::exp(logs[k] - top) / sum;
      const auto& c = components_[k];
      g -= resp * (theta - c.mean) / (c.stddev * c.stddev);
    }
    return g;
  }

 private:
  std::vector<double> component_logs(ConstVectorRef theta) const {
    std::vector<double> logs;
    logs.reserve(components_.size());
    const double r = static_cast<double>(theta.size());
    for (const auto& c : components_) {
      const double s2 = c.stddev * c.stddev;
      logs.push_back(std::log(c.weight) - r * std::log(c.stddev) -
                     (theta - c.mean).squaredNorm() / (2.0 * s2));
    }
    return logs;
  }

  std::vector<Component> components_;
};

/// One-dimensional double well U(theta) = height * (theta^2 - 1)^2 with
/// minima at +-1. No constant is dropped.
class DoubleWellTarget final : public TargetModel {
 public:
  explicit DoubleWellTarget(double height = 0.25) : height_(height) {
    require(height_ > 0.0, "DoubleWellTarget: height must be positive");
  }

  std::size_t dimension() const override { return 1; }
  std::string name() const override { return "double_well"; }
  double height() const { return height_; }

  double potential(double x) const {
    const double s = x * x - 1.0;
    return height_ * s * s;
  }
  /// Drift of the first-order Langevin diffusion, -U'(x).
  double drift(double x) const { return -4.0 * height_ * x * (x * x - 1.0); }

 protected:
  double do_potential(ConstVectorRef theta) const override { return potential(theta[0]); }
  Vector do_grad(ConstVectorRef theta) const override {
    return Vector::Constant(1, drift(theta[0]));
  }

 private:
  double height_;
};

/// log sigma(z) computed as -softplus(-z).
inline double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Bayesian logistic regression with labels y in {-1,+1}, likelihood
/// sigma(y theta^T x) and prior N(0, alpha^{-1} I).
/// U = sum_i softplus(-y_i theta^T x_i) + alpha |theta|^2 / 2; the Gaussian
/// prior normalizer is dropped. alpha = 0 gives a flat prior.
class LogisticRegressionTarget final : public TargetModel {
 public:
  LogisticRegressionTarget(Dataset data, double prior_precision = 0.01)
      : data_(std::move(data)), alpha_(prior_precision) {
    require(alpha_ >= 0.0, "LogisticRegressionTarget: prior precision must be >= 0");
    require(data_.dimension() > 0, "LogisticRegressionTarget: zero feature columns");
  }

  std::size_t dimension() const override { return data_.dimension(); }
  std::size_t dataset_size() const override { return data_.size(); }
  std::string name() const override { return "logistic"; }
  double prior_precision() const { return alpha_; }
  const Dataset& data() const { return data_; }

  std::optional<GaussianPrior> prior() const override {
    if (alpha_ <= 0.0) return std::nullopt;
    return GaussianPrior{Vector::Zero(static_cast<Eigen::Index>(dimension())),
                         1.0 / std::sqrt(alpha_)};
  }

 protected:
  double do_potential(ConstVectorRef theta) const override {
    double u = 0.5 * alpha_ * theta.squaredNorm();
    for (std::size_t i = 0; i < data_.size(); ++i) {
      u -= log_sigmoid(data_.label(i) * data_.row(i).dot(theta.transpose()));
    }
    return u;
  }

  Vector do_grad(ConstVectorRef theta) const override {
    Vector g = -alpha_ * theta;
    if (data_.size() == 0) return g;
    Vector sum = Vector::Zero(theta.size());
    for (std::size_t i = 0; i < data_.size(); ++i) accumulate(theta, i, sum);
    g += sum;
    return g;
  }

  Vector do_stochastic_grad(ConstVectorRef theta, BatchIndices batch) const override {
    Vector sum = Vector::Zero(theta.size());
    for (std::size_t i : batch) accumulate(theta, i, sum);
    const double scale =
        static_cast<double>(data_.size()) / static_cast<double>(batch.size());
    Vector g = -alpha_ * theta;
    if (scale == 1.0) {
      g += sum;
    } else {
      g += scale * sum;
    }
    return g;
  }

 private:
  // d/dtheta log sigma(y theta^T x) = y x sigma(-y theta^T x)
  void accumulate(ConstVectorRef theta, std::size_t i, Vector& sum) const {
    const double y = data_.label(i);
    const double z = data_.row(i).dot(theta.transpose());
    sum += (y * sigmoid(-y * z)) * data_.row(i).transpose();
  }

  Dataset data_;
  double alpha_;
};

struct LogisticMetrics {
  double accuracy = 0.0;
  double mean_log_likelihood = 0.0;
};

/// Posterior-predictive accuracy and mean log-likelihood on a test set. The
/// predictive P(y | x) averages the per-particle sigmoids; a point counts as
/// correct when the averaged probability of its true label is >= 0.5 for
/// y = +1 and > 0.5 for y = -1 (ties predict +1).
inline LogisticMetrics logistic_metrics(const LogisticRegressionTarget& model,
                                        const ParticleSet& particles,
                                        const Dataset& test) {
  require(test.size() > 0, "logistic_metrics: empty test set");
  require(test.dimension() == model.dimension() &&
              static_cast<std::size_t>(particles.cols()) == model.dimension(),
          "logistic_metrics: dimension mismatch");
  require(particles.rows() > 0, "logistic_metrics: no particles");
  const auto m = particles.rows();
  const double log_m = std::log(static_cast<double>(m));
  std::size_t correct = 0;
  double loglik = 0.0;
  std::vector<double> logs(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double y = test.label(i);
    for (Eigen::Index k = 0; k < m; ++k) {
      logs[static_cast<std::size_t>(k)] =
          log_sigmoid(y * test.row(i).dot(particles.row(k)));
    }
    const double top = *std::max_element(logs.begin(), logs.end());
    double s = 0.0;
    for (double l : logs) s += std::exp(l - top);
    const double log_p_true = top + std::log(s) - log_m;
    loglik += log_p_true;
    const double p_true = std::exp(log_p_true);
    if (y > 0 ? p_true >= 0.5 : p_true > 0.5) ++correct;
  }
  const double n = static_cast<double>(test.size());
  return {static_cast<double>(correct) / n, loglik / n};
}

}  // namespace posteriorflow
