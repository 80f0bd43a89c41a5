#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace posteriorflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// M x r particle matrix, one particle per row.
using ParticleSet =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Caller broke a documented precondition (shape, range, empty input).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A gradient or density evaluation produced a non-finite value.
class NumericOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A sampler step produced a non-finite particle.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t particle)
      : std::runtime_error(what + " (particle " + std::to_string(particle) + ")"),
        particle_(particle) {}

  std::size_t particle() const noexcept { return particle_; }

 private:
  std::size_t particle_;
};

/// A grid solver violated a stability bound or failed to converge.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double last_objective = 0.0)
      : std::runtime_error(what), last_objective_(last_objective) {}

  double last_objective() const noexcept { return last_objective_; }

 private:
  double last_objective_;
};

inline void require(bool condition, const char* message) {
  if (!condition) throw ContractViolation(message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace posteriorflow
