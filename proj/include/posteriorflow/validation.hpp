#pragma once

// Named self-check suites behind `posteriorflow validate <suite>`. Each check
// is independent of the code path it exercises where that is practical (the
// momentum suite carries its own Polyak-momentum SVGD).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/dataset.hpp"
#include "posteriorflow/experiment.hpp"
#include "posteriorflow/fpe.hpp"
#include "posteriorflow/metrics.hpp"
#include "posteriorflow/rng.hpp"
#include "posteriorflow/samplers.hpp"
#include "posteriorflow/targets.hpp"

namespace posteriorflow::validation {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// gradcheck

/// Largest relative error between grad_log_posterior and central differences
/// of log_unnorm_density, over `points` draws from N(0, scale^2 I).
inline double max_gradient_error(const TargetModel& model, std::size_t points, double scale,
                                 std::uint64_t seed) {
  const auto r = static_cast<Eigen::Index>(model.dimension());
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    rng::Stream s(seed, rng::Purpose::kTest, 0, p);
    Vector theta(r);
    for (Eigen::Index t = 0; t < r; ++t) theta[t] = scale * s.normal();
    const Vector g = model.grad_log_posterior(theta);
    Vector fd(r);
    for (Eigen::Index t = 0; t < r; ++t) {
      const double eps = 1e-5 * std::max(1.0, std::abs(theta[t]));
      Vector up = theta, dn = theta;
      up[t] += eps;
      dn[t] -= eps;
      fd[t] = (model.log_unnorm_density(up) - model.log_unnorm_density(dn)) / (2.0 * eps);
    }
    const double err = (g - fd).norm() / std::max(1.0, g.norm());
    worst = std::max(worst, err);
  }
  return worst;
}

/// Largest deviation between the full gradient and the average of the
/// minibatch gradient over every size-n subset.
inline double minibatch_enumeration_error(const TargetModel& model, std::size_t n,
                                          std::size_t points, std::uint64_t seed) {
  const std::size_t big_n = model.dataset_size();
  const auto r = static_cast<Eigen::Index>(model.dimension());
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    rng::Stream s(seed, rng::Purpose::kTest, 1, p);
    Vector theta(r);
    for (Eigen::Index t = 0; t < r; ++t) theta[t] = s.normal();
    // Walk all n-subsets in lexicographic order.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Vector mean = Vector::Zero(r);
    std::size_t subsets = 0;
    while (true) {
      mean += model.stochastic_grad(theta, idx);
      ++subsets;
      std::size_t k = n;
      while (k > 0 && idx[k - 1] == big_n - n + (k - 1)) --k;
      if (k == 0) break;
      ++idx[k - 1];
      for (std::size_t j = k; j < n; ++j) idx[j] = idx[j - 1] + 1;
    }
    mean /= static_cast<double>(subsets);
    const Vector full = model.grad_log_posterior(theta);
    worst = std::max(worst, (mean - full).lpNorm<Eigen::Infinity>() / std::max(1.0, full.norm()));
  }
  return worst;
}

inline std::vector<Check> gradcheck_suite() {
  std::vector<Check> out;
  const auto synth = synth_logistic(200, 5, 3);
  const LogisticRegressionTarget logistic(synth.train, 0.01);
  const GaussianTarget gaussian = [] {
    Matrix p(3, 3);
    p << 2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5;
    Vector m(3);
    m << 1.0, -2.0, 0.5;
    return GaussianTarget(m, p);
  }();
  const auto mixture = GaussianMixtureTarget::symmetric_pair(2, 1.5);
  const DoubleWellTarget well(0.25);
  const struct {
    const TargetModel* model;
    double scale;
  } models[] = {{&logistic, 0.5}, {&gaussian, 2.0}, {&mixture, 2.0}, {&well, 1.5}};
  for (const auto& m : models) {
    const double err = max_gradient_error(*m.model, 100, m.scale, 11);
    out.push_back({"finite-difference gradient " + m.model->name(), err <= 1e-5,
                   "max rel err " + fmt(err)});
  }
  const auto tiny = synth_logistic(8, 3, 5);
  Dataset six(tiny.train.features().topRows(6), tiny.train.labels().head(6));
  const LogisticRegressionTarget small(six, 0.5);
  const double enum_err = minibatch_enumeration_error(small, 2, 20, 13);
  out.push_back({"minibatch unbiasedness N=6 n=2", enum_err <= 1e-12,
                 "max err " + fmt(enum_err)});
  return out;
}

// ---------------------------------------------------------------------------
// fpe

inline std::vector<Check> fpe_suite() {
  std::vector<Check> out;
  {
    // Pure diffusion from a narrow Gaussian: variance grows by 2 D T.
    const Grid1D g(-10.0, 10.0, 800);
    const double v0 = 0.25, d = 1.0, t = 1.0;
    const auto init = GridDensity::from_function(g, [&](double x) {
      return std::exp(-x * x / (2.0 * v0));
    });
    const DiffusionSpec spec{[](double) { return 0.0; }, d};
    const auto rho = fp_solve_1d(spec, init, t, 0.9 * fp_stable_dt(spec, g));
    const double growth = rho.variance() - init.variance();
    const double rel = std::abs(growth - 2.0 * d * t) / (2.0 * d * t);
    out.push_back({"heat equation variance growth 2DT", rel <= 0.02, "rel err " + fmt(rel)});
  }
  {
    const Grid1D g(-8.0, 8.0, 3200);
    const auto gauss = GridDensity::gibbs(g, [](double x) { return 0.5 * x * x; });
    const auto spec = DiffusionSpec::ornstein_uhlenbeck();
    FpReport rep;
    const auto rho = fp_solve_1d(spec, gauss, 1.0, 0.9 * fp_stable_dt(spec, g), &rep);
    const double tv = tv_distance(rho, gauss);
    out.push_back({"Ornstein-Uhlenbeck stationary density preserved", tv <= 1e-3,
                   "TV " + fmt(tv)});
    out.push_back({"per-step mass drift", rep.max_step_mass_drift <= 1e-12,
                   "max drift " + fmt(rep.max_step_mass_drift)});
  }
  {
    const DoubleWellTarget well(0.25);
    const Grid1D g(-4.0, 4.0, 400);
    const auto gibbs = GridDensity::gibbs(g, [&](double x) { return well.potential(x); });
    const auto init = GridDensity::from_function(g, [](double x) {
      return std::exp(-(x - 1.0) * (x - 1.0) / 0.5);
    });
    const auto spec = DiffusionSpec::langevin([&](double x) { return well.drift(x); });
    const auto rho = fp_solve_1d(spec, init, 20.0, 0.9 * fp_stable_dt(spec, g));
    const double tv = tv_distance(rho, gibbs);
    out.push_back({"double-well long-time density matches Gibbs", tv <= 0.02, "TV " + fmt(tv)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// jko

inline std::vector<Check> jko_suite() {
  std::vector<Check> out;
  const Grid1D g(-6.5, 7.0, 270);
  std::vector<double> log_target(g.cells());
  for (std::size_t i = 0; i < g.cells(); ++i) log_target[i] = -0.5 * g.center(i) * g.center(i);
  const auto target = GridDensity::from_log_density(g, log_target);
  const auto init = GridDensity::from_function(g, [](double x) {
    return std::exp(-(x - 2.0) * (x - 2.0) / 0.5);
  });
  {
    const auto rho = jko_step_1d(init, log_target, 1e6);
    const double tv = tv_distance(rho, target);
    out.push_back({"large h reaches the target", tv <= 1e-4, "TV " + fmt(tv)});
  }
  {
    const auto rho = jko_step_1d(init, log_target, 1e-8);
    const double tv = tv_distance(rho, init);
    out.push_back({"small h stays at the previous density", tv <= 1e-4, "TV " + fmt(tv)});
  }
  {
    JkoReport rep;
    jko_step_1d(init, log_target, 0.05, {}, &rep);
    bool monotone = true;
    for (std::size_t k = 1; k < rep.objective_history.size(); ++k) {
      monotone = monotone && rep.objective_history[k] <= rep.objective_history[k - 1];
    }
    out.push_back({"objective history non-increasing", monotone,
                   std::to_string(rep.objective_history.size()) + " entries"});
  }
  {
    const auto spec = DiffusionSpec::ornstein_uhlenbeck();
    const auto ref = fp_solve_1d(spec, init, 0.2, 0.9 * fp_stable_dt(spec, g));
    const auto rho = jko_flow_1d(init, log_target, 0.01, 20);
    const double tv = tv_distance(rho, ref);
    out.push_back({"20 steps h=0.01 track the Fokker-Planck flow", tv <= 0.05, "TV " + fmt(tv)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// momentum-equivalence

/// SVGD with Polyak momentum written from scratch: the velocity form
///   v <- mu v + h phi(theta),  theta <- theta + v.
class MomentumSvgdReference {
 public:
  MomentumSvgdReference(const TargetModel& model, ParticleSet init, double h, double mu)
      : model_(model), theta_(std::move(init)), h_(h), mu_(mu) {
    v_ = ParticleSet::Zero(theta_.rows(), theta_.cols());
  }

  void step() {
    const auto m = theta_.rows();
    const auto r = theta_.cols();
    // Median heuristic over i < j pairs, lower-middle element.
    std::vector<double> d2;
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = i + 1; j < m; ++j) {
        double s = 0.0;
        for (Eigen::Index t = 0; t < r; ++t) {
          const double d = theta_(i, t) - theta_(j, t);
          s += d * d;
        }
        d2.push_back(s);
      }
    }
    std::sort(d2.begin(), d2.end());
    double bw2 = d2.empty() ? 1.0 : d2[(d2.size() - 1) / 2];
    bw2 = bw2 > 0.0 ? bw2 / std::log(static_cast<double>(m) + 1.0) : 1.0;

    ParticleSet scores(m, r);
    for (Eigen::Index j = 0; j < m; ++j) {
      scores.row(j) = model_.grad_log_posterior(theta_.row(j).transpose()).transpose();
    }
    ParticleSet phi = ParticleSet::Zero(m, r);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) {
        double s = 0.0;
        for (Eigen::Index t = 0; t < r; ++t) {
          const double d = theta_(j, t) - theta_(i, t);
          s += d * d;
        }
        const double k = std::exp(-s / bw2);
        for (Eigen::Index t = 0; t < r; ++t) {
          phi(i, t) += k * scores(j, t) - 2.0 * k * (theta_(j, t) - theta_(i, t)) / bw2;
        }
      }
    }
    phi /= static_cast<double>(m);
    v_ = mu_ * v_ + h_ * phi;
    theta_ += v_;
  }

  const ParticleSet& particles() const { return theta_; }

 private:
  const TargetModel& model_;
  ParticleSet theta_;
  ParticleSet v_;
  double h_;
  double mu_;
};

inline std::vector<Check> momentum_suite() {
  std::vector<Check> out;
  const GaussianTarget target = [] {
    Vector m(5);
    m << 0.5, -1.0, 0.0, 2.0, 1.0;
    Matrix p = Matrix::Identity(5, 5);
    for (int i = 0; i < 4; ++i) p(i, i + 1) = p(i + 1, i) = 0.2;
    return GaussianTarget(m, p);
  }();
  SamplerConfig cfg;
  cfg.stepsize = 0.05;
  cfg.momentum = 0.1;
  cfg.noise_scale = 0.0;
  cfg.particles = 20;
  cfg.seed = 21;
  SamplerState state = init_particles(cfg, target, InitSpec::gaussian(Vector::Zero(5), 2.0));
  MomentumSvgdReference ref(target, state.current, cfg.stepsize, cfg.momentum);
  double worst = 0.0;
  for (int l = 0; l < 100; ++l) {
    state = po_sgmcmc_step(std::move(state), target, cfg, {});
    ref.step();
    worst = std::max(worst, (state.current - ref.particles()).cwiseAbs().maxCoeff());
  }
  out.push_back({"sigma0=0 matches Polyak-momentum SVGD over 100 steps", worst <= 1e-12,
                 "max abs diff " + fmt(worst)});

  SamplerConfig plain = cfg;
  plain.momentum = 0.0;
  SamplerState a = init_particles(plain, target, InitSpec::gaussian(Vector::Zero(5), 2.0));
  SamplerState b = a;
  double reduction = 0.0;
  for (int l = 0; l < 100; ++l) {
    a = po_sgmcmc_step(std::move(a), target, plain, {});
    b = svgd_step(std::move(b), target, plain, {});
    reduction = std::max(reduction, (a.current - b.current).cwiseAbs().maxCoeff());
  }
  out.push_back({"sigma0=0 mu=0 reduces to the SVGD step", reduction <= 1e-15,
                 "max abs diff " + fmt(reduction)});
  return out;
}

// ---------------------------------------------------------------------------
// lemma2

inline std::vector<double> random_simplex(rng::Stream& s, std::size_t k, bool sparse) {
  std::vector<double> w(k);
  for (auto& v : w) v = -std::log(s.uniform());
  if (sparse) w[static_cast<std::size_t>(s() % k)] = 0.0;
  return w;
}

inline std::vector<Check> lemma2_suite() {
  std::vector<Check> out;
  bool nonneg = true, zero_iff = true, convex = true;
  double worst_self = 0.0;
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    rng::Stream s(99, rng::Purpose::kTest, 2, trial);
    const std::size_t k = 2 + s() % 9;
    const auto p = DiscreteDist::from_weights(random_simplex(s, k, trial % 4 == 0));
    const auto q = DiscreteDist::from_weights(random_simplex(s, k, false));
    const auto p2 = DiscreteDist::from_weights(random_simplex(s, k, false));
    const auto q2 = DiscreteDist::from_weights(random_simplex(s, k, false));
    const double kl = kl_discrete(p, q);
    const double js = jsd_discrete(p, q);
    nonneg = nonneg && kl >= 0.0 && js >= 0.0;
    const double self = std::max(kl_discrete(p, p), jsd_discrete(p, p));
    worst_self = std::max(worst_self, std::abs(self));
    double l1 = 0.0;
    for (std::size_t i = 0; i < k; ++i) l1 += std::abs(p[i] - q[i]);
    if (l1 > 1e-6) zero_iff = zero_iff && kl > 1e-12 && js > 1e-12;
    std::vector<double> pm(k), qm(k);
    for (std::size_t i = 0; i < k; ++i) {
      pm[i] = 0.5 * (p2[i] + q[i]);
      qm[i] = 0.5 * (q2[i] + p[i]);
    }
    // Midpoint of (p2, q2) and (q, p) pairs.
    const double lhs = kl_discrete(DiscreteDist::from_weights(pm), DiscreteDist::from_weights(qm));
    const double rhs = 0.5 * (kl_discrete(p2, q2) + kl_discrete(q, p));
    convex = convex && lhs <= rhs + 1e-12;
  }
  out.push_back({"KL and JSD non-negative on 1000 pairs", nonneg, ""});
  out.push_back({"KL(p||p) = JSD(p||p) = 0", worst_self <= 1e-12, "max " + fmt(worst_self)});
  out.push_back({"KL and JSD strictly positive when p != q", zero_iff, ""});
  out.push_back({"KL midpoint convexity on 1000 triples", convex, ""});
  return out;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"gradcheck", "fpe", "jko",
                                                 "momentum-equivalence", "lemma2"};
  return names;
}

/// validate <suite>: prints one PASS/FAIL line per check; 0 iff all pass,
/// 1 for an unknown suite or any failure.
inline int cmd_validate(const std::string& suite, std::ostream& out, std::ostream& err) {
  std::function<std::vector<Check>()> run;
  if (suite == "gradcheck") run = gradcheck_suite;
  else if (suite == "fpe") run = fpe_suite;
  else if (suite == "jko") run = jko_suite;
  else if (suite == "momentum-equivalence") run = momentum_suite;
  else if (suite == "lemma2") run = lemma2_suite;
  else {
    err << "unknown suite '" << suite << "'; valid suites:";
    for (const auto& n : suite_names()) err << " " << n;
    err << "\n";
    return 1;
  }
  std::vector<Check> checks;
  try {
    checks = run();
  } catch (const std::exception& e) {
    checks.push_back({suite + " suite raised", false, e.what()});
  }
  bool all = true;
  for (const auto& c : checks) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) out << " (" << c.detail << ")";
    out << "\n";
    all = all && c.passed;
  }
  return all ? 0 : 1;
}

}  // namespace posteriorflow::validation
