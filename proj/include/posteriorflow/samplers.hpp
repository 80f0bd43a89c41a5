#pragma once

// Particle and chain updaters (SGLD, SGHMC, SVGD, particle-optimized
// SG-MCMC) and the seeded run loop that drives them.
//
// All randomness comes from counter streams keyed by (seed, iteration,
// particle), so a step gives the same result whether particles are updated
// serially or in parallel.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/dataset.hpp"
#include "posteriorflow/kernels.hpp"
#include "posteriorflow/parallel.hpp"
#include "posteriorflow/rng.hpp"
#include "posteriorflow/stein.hpp"
#include "posteriorflow/targets.hpp"

namespace posteriorflow {

enum class SamplerKind { kSgld, kSghmc, kSvgd, kPoSgmcmc };

inline std::string_view to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::kSgld: return "sgld";
    case SamplerKind::kSghmc: return "sghmc";
    case SamplerKind::kSvgd: return "svgd";
    case SamplerKind::kPoSgmcmc: return "po_sgmcmc";
  }
  return "unknown";
}

inline std::optional<SamplerKind> parse_sampler(std::string_view name) {
  for (auto kind : {SamplerKind::kSgld, SamplerKind::kSghmc, SamplerKind::kSvgd,
                    SamplerKind::kPoSgmcmc}) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

struct SamplerConfig {
  double stepsize = 0.01;       // h
  double momentum = 0.1;        // mu, scale on the quadratic-W2 term
  double noise_scale = 0.1;     // sigma_0
  double noise_decay = 0.55;    // gamma in sigma_l = sigma_0 / l^gamma
  double friction = 1.0;        // B (SGHMC)
  std::size_t batch_size = 32;  // n
  std::uint64_t seed = 0;
  std::size_t particles = 20;   // M
  // Test hook: false suppresses every injected Gaussian term.
  bool inject_noise = true;

  void validate() const {
    require(std::isfinite(stepsize) && stepsize >= 0.0, "SamplerConfig: stepsize must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "SamplerConfig: momentum must lie in [0, 1)");
    require(noise_scale >= 0.0, "SamplerConfig: noise scale must be >= 0");
    require(noise_decay >= 0.0, "SamplerConfig: noise decay must be >= 0");
    require(friction > 0.0, "SamplerConfig: friction must be positive");
    require(batch_size > 0, "SamplerConfig: batch size must be positive");
    require(particles > 0, "SamplerConfig: particle count must be positive");
  }

  /// sigma_l = sigma_0 / max(l, 1)^gamma.
  double noise_at(std::uint64_t iteration) const {
    const double l = static_cast<double>(std::max<std::uint64_t>(iteration, 1));
    return noise_scale / std::pow(l, noise_decay);
  }
};

struct SamplerState {
  ParticleSet current;
  ParticleSet previous;
  ParticleSet velocity;  // SGHMC momentum q; zero for the other samplers
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
};

/// How particles are seeded.
struct InitSpec {
  struct FromModel {};  // model prior when it has one, else N(0, I)
  struct Gaussian {
    Vector mean;
    double stddev;
  };
  struct PointMass {
    Vector location;
  };
  std::variant<FromModel, Gaussian, PointMass> source = FromModel{};

  static InitSpec from_model() { return {}; }
  static InitSpec gaussian(Vector mean, double stddev) {
    return {Gaussian{std::move(mean), stddev}};
  }
  static InitSpec point_mass(Vector location) { return {PointMass{std::move(location)}}; }
};

inline SamplerState init_particles(const SamplerConfig& config, const TargetModel& model,
                                   const InitSpec& init = {}) {
  config.validate();
  const auto m = static_cast<Eigen::Index>(config.particles);
  const auto r = static_cast<Eigen::Index>(model.dimension());
  Vector mean = Vector::Zero(r);
  double sd = 1.0;
  bool point = false;
  if (const auto* g = std::get_if<InitSpec::Gaussian>(&init.source)) {
    require(g->mean.size() == r, "init_particles: init mean has wrong dimension");
    require(g->stddev >= 0.0, "init_particles: init stddev must be >= 0");
    mean = g->mean;
    sd = g->stddev;
  } else if (const auto* p = std::get_if<InitSpec::PointMass>(&init.source)) {
    require(p->location.size() == r, "init_particles: point mass has wrong dimension");
    mean = p->location;
    point = true;
  } else if (auto prior = model.prior()) {
    mean = prior->mean;
    sd = prior->stddev;
  }
  SamplerState state;
  state.seed = config.seed;
  state.current.resize(m, r);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (point) {
      state.current.row(i) = mean.transpose();
      continue;
    }
    rng::Stream stream(config.seed, rng::Purpose::kInit, 0, static_cast<std::uint64_t>(i));
    for (Eigen::Index t = 0; t < r; ++t) state.current(i, t) = mean[t] + sd * stream.normal();
  }
  state.previous = state.current;
  state.velocity = ParticleSet::Zero(m, r);
  return state;
}

namespace detail {

inline void fill_normals(Eigen::Ref<Eigen::RowVectorXd> out, std::uint64_t seed,
                         rng::Purpose purpose, std::uint64_t iteration,
                         std::size_t particle) {
  rng::Stream stream(seed, purpose, iteration, particle);
  for (Eigen::Index t = 0; t < out.size(); ++t) out[t] = stream.normal();
}

inline ParticleSet gradients(const TargetModel& model, const ParticleSet& particles,
                             BatchIndices batch) {
  ParticleSet g(particles.rows(), particles.cols());
  parallel_for(static_cast<std::size_t>(particles.rows()), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    g.row(i) = model.stochastic_grad(particles.row(i).transpose(), batch).transpose();
  }, 4);
  return g;
}

inline void check_finite(const ParticleSet& particles, const char* sampler) {
  for (Eigen::Index i = 0; i < particles.rows(); ++i) {
    if (!particles.row(i).allFinite()) {
      throw DivergenceError(std::string(sampler) + ": non-finite particle",
                            static_cast<std::size_t>(i));
    }
  }
}

inline void check_state(const SamplerState& state, const TargetModel& model) {
  require(state.current.rows() > 0, "sampler: empty particle set");
  require(static_cast<std::size_t>(state.current.cols()) == model.dimension(),
          "sampler: particle dimension differs from model");
  require(state.previous.rows() == state.current.rows() &&
              state.previous.cols() == state.current.cols(),
          "sampler: previous and current particle sets differ in shape");
}

}  // namespace detail

/// theta <- theta + h * grad log p~(theta) + sqrt(2h) * delta, one independent
/// chain per particle.
inline SamplerState sgld_step(SamplerState state, const TargetModel& model,
                              const SamplerConfig& config, BatchIndices batch) {
  detail::check_state(state, model);
  const std::uint64_t next = state.iteration + 1;
  const double h = config.stepsize;
  const double scale = std::sqrt(2.0 * h);
  const ParticleSet grads = detail::gradients(model, state.current, batch);
  ParticleSet updated(state.current.rows(), state.current.cols());
  parallel_for(static_cast<std::size_t>(updated.rows()), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    updated.row(i) = state.current.row(i) + h * grads.row(i);
    if (config.inject_noise && scale > 0.0) {
      Eigen::RowVectorXd delta(updated.cols());
      detail::fill_normals(delta, state.seed, rng::Purpose::kNoise, next, row);
      updated.row(i) += scale * delta;
    }
  }, 64);
  detail::check_finite(updated, "sgld");
  state.previous = std::move(state.current);
  state.current = std::move(updated);
  state.iteration = next;
  return state;
}

/// Euler step of the second-order Langevin diffusion, both blocks evaluated
/// at the old state:
///   theta <- theta + q h
///   q     <- q - (B q + grad U~(theta)) h + sqrt(2 B h) delta
inline SamplerState sghmc_step(SamplerState state, const TargetModel& model,
                               const SamplerConfig& config, BatchIndices batch) {
  detail::check_state(state, model);
  if (state.velocity.rows() != state.current.rows() ||
      state.velocity.cols() != state.current.cols()) {
    state.velocity = ParticleSet::Zero(state.current.rows(), state.current.cols());
  }
  const std::uint64_t next = state.iteration + 1;
  const double h = config.stepsize;
  const double b = config.friction;
  const double scale = std::sqrt(2.0 * b * h);
  const ParticleSet grads = detail::gradients(model, state.current, batch);
  ParticleSet theta(state.current.rows(), state.current.cols());
  ParticleSet q(state.current.rows(), state.current.cols());
  parallel_for(static_cast<std::size_t>(theta.rows()), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    theta.row(i) = state.current.row(i) + state.velocity.row(i) * h;
    // grad U~ = -grads
    q.row(i) = state.velocity.row(i) - (b * state.velocity.row(i) - grads.row(i)) * h;
    if (config.inject_noise && scale > 0.0) {
      Eigen::RowVectorXd delta(q.cols());
      detail::fill_normals(delta, state.seed, rng::Purpose::kMomentumNoise, next, row);
      q.row(i) += scale * delta;
    }
  }, 64);
  detail::check_finite(theta, "sghmc");
  detail::check_finite(q, "sghmc");
  state.previous = std::move(state.current);
  state.current = std::move(theta);
  state.velocity = std::move(q);
  state.iteration = next;
  return state;
}

/// Stein direction at the current particles, bandwidth from the median
/// heuristic, scores from minibatch gradients.
inline SteinDirection current_stein_direction(const SamplerState& state,
                                              const TargetModel& model,
                                              BatchIndices batch) {
  const RbfKernel kernel(median_heuristic(state.current));
  const ParticleSet grads = detail::gradients(model, state.current, batch);
  return stein_direction(state.current, kernel, grads);
}

/// theta_i <- theta_i + h * phi(theta_i).
inline SamplerState svgd_step(SamplerState state, const TargetModel& model,
                              const SamplerConfig& config, BatchIndices batch) {
  detail::check_state(state, model);
  const SteinDirection phi = current_stein_direction(state, model, batch);
  ParticleSet updated = state.current + config.stepsize * phi;
  detail::check_finite(updated, "svgd");
  state.previous = std::move(state.current);
  state.current = std::move(updated);
  state.iteration += 1;
  return state;
}

/// theta_i^(l) = theta_i^(l-1) + h (phi(theta_i^(l-1)) + sigma_l delta)
///             + mu (theta_i^(l-1) - theta_i^(l-2))
/// The Stein term enters with a plus sign (ascent), so sigma_0 = mu = 0
/// reproduces svgd_step exactly.
inline SamplerState po_sgmcmc_step(SamplerState state, const TargetModel& model,
                                   const SamplerConfig& config, BatchIndices batch) {
  detail::check_state(state, model);
  const std::uint64_t next = state.iteration + 1;
  const double h = config.stepsize;
  const double mu = config.momentum;
  const double sigma = config.noise_at(next);
  const bool noisy = config.inject_noise && sigma > 0.0;
  const SteinDirection phi = current_stein_direction(state, model, batch);
  ParticleSet updated(state.current.rows(), state.current.cols());
  parallel_for(static_cast<std::size_t>(updated.rows()), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    Eigen::RowVectorXd drive = phi.row(i);
    if (noisy) {
      Eigen::RowVectorXd delta(updated.cols());
      detail::fill_normals(delta, state.seed, rng::Purpose::kNoise, next, row);
      drive += sigma * delta;
    }
    updated.row(i) = state.current.row(i) + h * drive +
                     mu * (state.current.row(i) - state.previous.row(i));
  }, 64);
  detail::check_finite(updated, "po_sgmcmc");
  state.previous = std::move(state.current);
  state.current = std::move(updated);
  state.iteration = next;
  return state;
}

inline SamplerState step(SamplerKind kind, SamplerState state, const TargetModel& model,
                         const SamplerConfig& config, BatchIndices batch) {
  switch (kind) {
    case SamplerKind::kSgld: return sgld_step(std::move(state), model, config, batch);
    case SamplerKind::kSghmc: return sghmc_step(std::move(state), model, config, batch);
    case SamplerKind::kSvgd: return svgd_step(std::move(state), model, config, batch);
    case SamplerKind::kPoSgmcmc: return po_sgmcmc_step(std::move(state), model, config, batch);
  }
  throw ContractViolation("unknown sampler");
}

struct MetricHook {
  std::string name;
  std::function<double(const SamplerState&)> evaluate;
};

struct TraceRecord {
  std::uint64_t iteration;
  double wall_seconds;
  std::string metric;
  double value;
  std::uint64_t seed;
  SamplerKind sampler;
};

/// Append-only metric log. Iterations increase strictly within each metric.
class RunTrace {
 public:
  void append(TraceRecord record) {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->metric == record.metric) {
        require(record.iteration > it->iteration,
                "RunTrace: iterations must increase within a metric");
        break;
      }
    }
    records_.push_back(std::move(record));
  }

  const std::vector<TraceRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::size_t count(std::string_view metric) const {
    std::size_t n = 0;
    for (const auto& r : records_) n += (r.metric == metric);
    return n;
  }

 private:
  std::vector<TraceRecord> records_;
};

struct RunOptions {
  std::uint64_t iterations = 0;
  std::uint64_t hook_every = 1;  // hooks fire at iterations e, 2e, ...
  InitSpec init;
};

struct RunResult {
  RunTrace trace;
  SamplerState state;
  std::optional<std::string> error;  // set when the run aborted on divergence
};

/// Runs `sampler` from `initial` for the configured number of iterations,
/// drawing minibatches from a shuffled-epoch schedule seeded by config.seed.
inline RunResult run(SamplerKind sampler, const TargetModel& model,
                     const SamplerConfig& config, SamplerState initial,
                     const RunOptions& options, std::span<const MetricHook> hooks = {}) {
  config.validate();
  require(options.hook_every > 0, "run: hook period must be positive");
  RunResult result;
  result.state = std::move(initial);
  const std::size_t n_data = model.dataset_size();
  MinibatchSchedule schedule(n_data, n_data == 0 ? config.batch_size
                                                 : std::min(config.batch_size, n_data),
                             config.seed);
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t it = 0; it < options.iterations; ++it) {
    const std::vector<std::size_t> batch = schedule.next();
    try {
      // Pass a copy so the last good state survives a divergence.
      result.state = step(sampler, result.state, model, config, batch);
    } catch (const DivergenceError& e) {
      result.error = e.what();
      return result;
    } catch (const NumericOverflow& e) {
      result.error = e.what();
      return result;
    }
    if (result.state.iteration % options.hook_every != 0) continue;
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& hook : hooks) {
      result.trace.append({result.state.iteration, wall, hook.name,
                           hook.evaluate(result.state), config.seed, sampler});
    }
  }
  return result;
}

inline RunResult run(SamplerKind sampler, const TargetModel& model,
                     const SamplerConfig& config, const RunOptions& options,
                     std::span<const MetricHook> hooks = {}) {
  return run(sampler, model, config, init_particles(config, model, options.init), options,
             hooks);
}

}  // namespace posteriorflow
