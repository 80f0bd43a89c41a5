#pragma once

// One-dimensional ground truth for the samplers: an explicit finite-volume
// Fokker-Planck solver and a JKO (KL + W2 proximal) stepper on the same grid.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "posteriorflow/common.hpp"

namespace posteriorflow {

/// Uniform cell-centered grid on [left, right].
class Grid1D {
 public:
  Grid1D(double left, double right, std::size_t cells)
      : left_(left), right_(right), cells_(cells) {
    require(std::isfinite(left) && std::isfinite(right) && right > left,
            "Grid1D: need right > left");
    require(cells >= 2, "Grid1D: need at least 2 cells");
  }

  double left() const { return left_; }
  double right() const { return right_; }
  std::size_t cells() const { return cells_; }
  double spacing() const { return (right_ - left_) / static_cast<double>(cells_); }
  double center(std::size_t i) const { return left_ + (static_cast<double>(i) + 0.5) * spacing(); }
  double edge(std::size_t i) const { return left_ + static_cast<double>(i) * spacing(); }

  bool operator==(const Grid1D& other) const {
    return left_ == other.left_ && right_ == other.right_ && cells_ == other.cells_;
  }

 private:
  double left_;
  double right_;
  std::size_t cells_;
};

/// Piecewise-constant density on a Grid1D; sum(values) * dx == 1.
class GridDensity {
 public:
  GridDensity(Grid1D grid, std::vector<double> values)
      : grid_(grid), values_(std::move(values)) {
    require(values_.size() == grid_.cells(), "GridDensity: value count differs from grid");
    for (double v : values_) {
      require(std::isfinite(v) && v >= 0.0, "GridDensity: values must be finite and >= 0");
    }
    const double m = mass();
    require(std::abs(m - 1.0) <= 1e-10, "GridDensity: density does not integrate to 1");
  }

  /// Samples f at cell centers and normalizes by midpoint quadrature.
  static GridDensity from_function(const Grid1D& grid, const std::function<double(double)>& f) {
    std::vector<double> v(grid.cells());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(grid.center(i));
    return normalized(grid, std::move(v));
  }

  /// exp(log_density) at cell centers, normalized on the grid.
  static GridDensity from_log_density(const Grid1D& grid, const std::vector<double>& log_density) {
    require(log_density.size() == grid.cells(), "GridDensity: log-density size mismatch");
    const double top = *std::max_element(log_density.begin(), log_density.end());
    std::vector<double> v(grid.cells());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(log_density[i] - top);
    return normalized(grid, std::move(v));
  }

  /// Discretized Gibbs density exp(-U) / Z with Z by grid quadrature.
  static GridDensity gibbs(const Grid1D& grid, const std::function<double(double)>& potential) {
    std::vector<double> logs(grid.cells());
    for (std::size_t i = 0; i < logs.size(); ++i) logs[i] = -potential(grid.center(i));
    return from_log_density(grid, logs);
  }

  static GridDensity normalized(const Grid1D& grid, std::vector<double> values) {
    double total = 0.0;
    for (double v : values) {
      require(std::isfinite(v) && v >= 0.0, "GridDensity: values must be finite and >= 0");
      total += v;
    }
    require(total > 0.0, "GridDensity: zero mass");
    const double scale = 1.0 / (total * grid.spacing());
    for (double& v : values) v *= scale;
    return GridDensity(grid, std::move(values));
  }

  const Grid1D& grid() const { return grid_; }
  const std::vector<double>& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t size() const { return values_.size(); }

  double mass() const {
    return std::accumulate(values_.begin(), values_.end(), 0.0) * grid_.spacing();
  }

  double mean() const {
    double s = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) s += values_[i] * grid_.center(i);
    return s * grid_.spacing();
  }

  /// Variance of the piecewise-constant density (includes the dx^2/12
  /// within-cell spread).
  double variance() const {
    const double m = mean();
    const double dx = grid_.spacing();
    double s = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const double d = grid_.center(i) - m;
      s += values_[i] * d * d;
    }
    return s * dx + dx * dx / 12.0;
  }

  /// Cell masses (values * dx).
  std::vector<double> masses() const {
    std::vector<double> w(values_);
    for (double& v : w) v *= grid_.spacing();
    return w;
  }

 private:
  Grid1D grid_;
  std::vector<double> values_;
};

/// 0.5 * sum |a - b| * dx.
inline double tv_distance(const GridDensity& a, const GridDensity& b) {
  require(a.grid() == b.grid(), "tv_distance: densities live on different grids");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s * a.grid().spacing();
}

/// Averages groups of `factor` adjacent cells onto a coarser grid.
inline GridDensity coarsen(const GridDensity& density, std::size_t factor) {
  const Grid1D& g = density.grid();
  require(factor >= 1 && g.cells() % factor == 0, "coarsen: factor must divide the cell count");
  const Grid1D coarse(g.left(), g.right(), g.cells() / factor);
  std::vector<double> v(coarse.cells(), 0.0);
  for (std::size_t i = 0; i < g.cells(); ++i) v[i / factor] += density[i];
  for (double& x : v) x /= static_cast<double>(factor);
  return GridDensity::normalized(coarse, std::move(v));
}

/// Two-column CSV (cell center, density) with a header row.
inline void write_density_csv(const GridDensity& density, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ContractViolation("cannot write " + path);
  out << "x,density\n" << std::setprecision(17);
  for (std::size_t i = 0; i < density.size(); ++i) {
    out << density.grid().center(i) << ',' << density[i] << '\n';
  }
}

struct Histogram {
  GridDensity density;
  std::size_t clipped = 0;  // samples outside [left, right] moved to an end cell
};

/// Normalized cell counts of 1-D particles.
template <typename Samples>
Histogram histogram(const Samples& samples, const Grid1D& grid) {
  std::vector<double> counts(grid.cells(), 0.0);
  std::size_t clipped = 0;
  std::size_t n = 0;
  const double dx = grid.spacing();
  for (const double x : samples) {
    long idx = static_cast<long>(std::floor((x - grid.left()) / dx));
    if (x < grid.left() || x > grid.right()) ++clipped;
    idx = std::clamp<long>(idx, 0, static_cast<long>(grid.cells()) - 1);
    counts[static_cast<std::size_t>(idx)] += 1.0;
    ++n;
  }
  require(n > 0, "histogram: no samples");
  return {GridDensity::normalized(grid, std::move(counts)), clipped};
}

inline Histogram histogram(const ParticleSet& particles, const Grid1D& grid) {
  require(particles.cols() == 1, "histogram: particles must be one-dimensional");
  return histogram(std::vector<double>(particles.data(), particles.data() + particles.size()),
                   grid);
}

/// d theta = F(theta) dt + sqrt(2 D) dW in one dimension.
struct DiffusionSpec {
  std::function<double(double)> drift;
  double diffusion = 1.0;

  /// First-order Langevin dynamics for potential U: F = -U', D = 1.
  static DiffusionSpec langevin(std::function<double(double)> neg_grad_potential) {
    return {std::move(neg_grad_potential), 1.0};
  }

  static DiffusionSpec ornstein_uhlenbeck() {
    return {[](double x) { return -x; }, 1.0};
  }
};

struct FpReport {
  std::size_t steps = 0;
  double dt = 0.0;
  double max_step_mass_drift = 0.0;  // largest |mass - 1| before renormalizing
  double total_mass_drift = 0.0;
};

/// Largest dt the explicit scheme accepts on `grid`: dx^2 / (2 D + max|F| dx)
/// with F sampled at interior faces.
inline double fp_stable_dt(const DiffusionSpec& spec, const Grid1D& grid) {
  require(spec.drift != nullptr, "fp_stable_dt: missing drift");
  double max_drift = 0.0;
  for (std::size_t i = 1; i < grid.cells(); ++i) {
    max_drift = std::max(max_drift, std::abs(spec.drift(grid.edge(i))));
  }
  const double dx = grid.spacing();
  return dx * dx / (2.0 * spec.diffusion + max_drift * dx);
}

/// Explicit finite-volume solve of d rho/dt = -d(rho F)/dx + D d^2 rho/dx^2 up
/// to time T. Advection is upwinded at cell faces, diffusion is centered and
/// both boundaries are zero-flux. The step is shrunk so that an integer number
/// of steps lands on T; the requested dt must satisfy
/// dt <= dx^2 / (2 D + max|F| dx).
inline GridDensity fp_solve_1d(const DiffusionSpec& spec, const GridDensity& init, double T,
                               double dt, FpReport* report = nullptr) {
  require(spec.drift != nullptr, "fp_solve_1d: missing drift");
  require(spec.diffusion >= 0.0, "fp_solve_1d: diffusion must be >= 0");
  require(T >= 0.0 && dt > 0.0, "fp_solve_1d: need T >= 0 and dt > 0");
  const Grid1D& grid = init.grid();
  const std::size_t g = grid.cells();
  const double dx = grid.spacing();
  const double d = spec.diffusion;

  // Drift at interior faces 1..g-1.
  std::vector<double> face_drift(g + 1, 0.0);
  double max_drift = 0.0;
  for (std::size_t i = 1; i < g; ++i) {
    face_drift[i] = spec.drift(grid.edge(i));
    require(std::isfinite(face_drift[i]), "fp_solve_1d: drift is not finite on the grid");
    max_drift = std::max(max_drift, std::abs(face_drift[i]));
  }
  const double bound = dx * dx / (2.0 * d + max_drift * dx);
  if (dt > bound) {
    throw SolverError("fp_solve_1d: dt = " + std::to_string(dt) +
                      " violates the explicit stability bound " + std::to_string(bound));
  }

  std::vector<double> rho = init.values();
  FpReport rep;
  if (T == 0.0) {
    if (report) *report = rep;
    return init;
  }
  const auto steps = static_cast<std::size_t>(std::ceil(T / dt - 1e-9));
  const double h = T / static_cast<double>(steps);
  rep.steps = steps;
  rep.dt = h;
  const double lambda = h / dx;
  const double nu = d / dx;
  std::vector<double> flux(g + 1, 0.0);  // flux[0] = flux[g] = 0
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 1; i < g; ++i) {
      const double f = face_drift[i];
      const double advect = f > 0.0 ? f * rho[i - 1] : f * rho[i];
      flux[i] = advect - nu * (rho[i] - rho[i - 1]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
      rho[i] -= lambda * (flux[i + 1] - flux[i]);
      total += rho[i];
    }
    const double mass = total * dx;
    const double drift = std::abs(mass - 1.0);
    rep.max_step_mass_drift = std::max(rep.max_step_mass_drift, drift);
    rep.total_mass_drift += drift;
    const double scale = 1.0 / mass;
    for (double& v : rho) v = std::max(0.0, v * scale);
  }
  if (rep.total_mass_drift / T > 1e-6) {
    throw SolverError("fp_solve_1d: mass drift " + std::to_string(rep.total_mass_drift / T) +
                      " per unit time exceeds 1e-6");
  }
  if (report) *report = rep;
  return GridDensity::normalized(grid, std::move(rho));
}

struct JkoOptions {
  // Stops when max_i |dJ/dz_i| (log-mass coordinates) or the Newton
  // decrement drops to this value.
  double tolerance = 1e-8;
  std::size_t max_iterations = 200;
  double relative_floor = 1e-40;  // initial masses floored at this times the largest
};

struct JkoReport {
  std::size_t iterations = 0;
  double stationarity = 0.0;       // max |dJ/dz| at exit
  double newton_decrement = std::numeric_limits<double>::infinity();
  std::vector<double> objective_history;
};

namespace detail {

using Real = long double;

/// Piecewise-linear quantile function of a piecewise-constant density.
struct Quantile {
  std::vector<Real> cdf;   // cdf[i] = mass below edge i, size G + 1
  std::vector<Real> sf;    // sf[i] = mass above edge i, summed from the right
  std::vector<Real> mass;  // per cell
  Real left;
  Real dx;

  Quantile(const std::vector<Real>& masses, Real left_edge, Real spacing)
      : cdf(masses.size() + 1, 0.0L),
        sf(masses.size() + 1, 0.0L),
        mass(masses),
        left(left_edge),
        dx(spacing) {
    const std::size_t g = masses.size();
    for (std::size_t i = 0; i < g; ++i) cdf[i + 1] = cdf[i] + masses[i];
    for (std::size_t i = g; i-- > 0;) sf[i] = sf[i + 1] + masses[i];
    // Pin the total so both quantile functions share the interval [0, 1].
    const Real total = cdf.back();
    for (auto& c : cdf) c /= total;
    for (auto& c : sf) c /= total;
    for (auto& m : mass) m /= total;
  }

  Real edge(std::size_t i) const { return left + dx * static_cast<Real>(i); }

  /// The density mirrored through the origin. Its cumulative sums run from
  /// the right, which keeps the upper tail resolved.
  Quantile reflected() const {
    std::vector<Real> m(mass.rbegin(), mass.rend());
    return Quantile(m, -edge(mass.size()), dx);
  }
};

/// Integral over u in [0, 1/2] of (Q_cur - Q_prev)^2 and its gradient with
/// respect to the cumulative masses C_0..C_G of `cur`. Both quantile functions
/// are linear on every merged sub-interval, so Simpson's rule integrates each
/// piece exactly.
inline Real w2_lower_half(const Quantile& cur, const Quantile& prev, std::vector<Real>* grad) {
  const std::size_t g = cur.mass.size();
  if (grad) grad->assign(g + 1, 0.0L);
  Real total = 0.0L;
  std::size_t j = 0;  // prev cell
  const std::size_t gp = prev.mass.size();
  while (j < gp && prev.mass[j] <= 0.0L) ++j;
  for (std::size_t i = 0; i < g; ++i) {
    const Real a = cur.cdf[i];
    if (a >= 0.5L) break;
    const Real w = cur.mass[i];
    if (w <= 0.0L) continue;
    const Real b = std::min(cur.cdf[i + 1], 0.5L);
    Real u0 = a;
    while (u0 < b && j < gp) {
      const Real pb = prev.cdf[j + 1];
      const Real u1 = std::min(b, pb);
      if (u1 > u0) {
        const auto q = [&](Real u) { return cur.edge(i) + cur.dx * (u - a) / w; };
        const auto qp = [&](Real u) {
          return prev.edge(j) + prev.dx * (u - prev.cdf[j]) / prev.mass[j];
        };
        const Real um = 0.5L * (u0 + u1);
        const Real r0 = q(u0) - qp(u0);
        const Real rm = q(um) - qp(um);
        const Real r1 = q(u1) - qp(u1);
        const Real len = u1 - u0;
        total += len / 6.0L * (r0 * r0 + 4.0L * rm * rm + r1 * r1);
        if (grad) {
          // dQ/dC_i = -dx (1 - s) / w, dQ/dC_{i+1} = -dx s / w, s = (u - a) / w
          const Real s0 = (u0 - a) / w;
          const Real sm = (um - a) / w;
          const Real s1 = (u1 - a) / w;
          const Real lower = len / 6.0L * (r0 * (1.0L - s0) + 4.0L * rm * (1.0L - sm) +
                                           r1 * (1.0L - s1));
          const Real upper = len / 6.0L * (r0 * s0 + 4.0L * rm * sm + r1 * s1);
          (*grad)[i] += -2.0L * cur.dx / w * lower;
          (*grad)[i + 1] += -2.0L * cur.dx / w * upper;
        }
      }
      u0 = u1;
      if (u1 >= pb) {
        ++j;
        while (j < gp && prev.mass[j] <= 0.0L) ++j;
      } else {
        break;
      }
    }
  }
  return total;
}

/// Exact W2^2 between the piecewise-constant densities behind `cur` and
/// `prev` (quantile coupling), and optionally its gradient with respect to the
/// cumulative masses C_0..C_G of `cur`. The upper half of [0, 1] is integrated
/// on the reflected densities; W2 is invariant under reflection, and
/// C'_k = 1 - C_{G-k} there.
inline Real w2_piecewise(const Quantile& cur, const Quantile& prev, std::vector<Real>* grad,
                         const Quantile* prev_reflected = nullptr) {
  const std::size_t g = cur.mass.size();
  std::vector<Real> lower_grad, upper_grad;
  const Real lower = w2_lower_half(cur, prev, grad ? &lower_grad : nullptr);
  const Quantile cur_r = cur.reflected();
  const Real upper =
      prev_reflected ? w2_lower_half(cur_r, *prev_reflected, grad ? &upper_grad : nullptr)
                     : w2_lower_half(cur_r, prev.reflected(), grad ? &upper_grad : nullptr);
  if (grad) {
    grad->assign(g + 1, 0.0L);
    for (std::size_t k = 0; k <= g; ++k) (*grad)[k] = lower_grad[k] - upper_grad[g - k];
  }
  return lower + upper;
}

/// J(z) = KL(softmax(z) || pi) + W2^2(prev, softmax(z)) / (2h).
struct JkoProblem {
  Quantile prev;
  Quantile prev_reflected;
  std::vector<Real> log_target;  // normalized log cell masses
  Real inv_2h;
  Real left;
  Real dx;

  static std::vector<Real> softmax(const std::vector<Real>& z) {
    const Real top = *std::max_element(z.begin(), z.end());
    std::vector<Real> w(z.size());
    Real total = 0.0L;
    for (std::size_t i = 0; i < z.size(); ++i) {
      w[i] = std::exp(z[i] - top);
      total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
  }

  Real objective(const std::vector<Real>& z) const {
    const std::vector<Real> w = softmax(z);
    const Quantile cur(w, left, dx);
    Real kl = 0.0L;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] > 0.0L) kl += w[i] * (std::log(w[i]) - log_target[i]);
    }
    return kl + inv_2h * w2_piecewise(cur, prev, nullptr, &prev_reflected);
  }

  /// dJ/dz_j = w_j (g_j - sum_i w_i g_i) with g = dJ/dw.
  std::vector<Real> gradient(const std::vector<Real>& z) const {
    const std::vector<Real> w = softmax(z);
    const std::size_t g = w.size();
    const Quantile cur(w, left, dx);
    std::vector<Real> wg;
    w2_piecewise(cur, prev, &wg, &prev_reflected);
    // C_k = sum_{i<k} w_i, so dW/dw_i collects dW/dC_k for k > i.
    std::vector<Real> gw(g);
    Real tail = 0.0L;
    for (std::size_t i = g; i-- > 0;) {
      tail += wg[i + 1];
      const Real lw = w[i] > 0.0L ? std::log(w[i]) : std::log(std::numeric_limits<Real>::min());
      gw[i] = lw - log_target[i] + inv_2h * tail;
    }
    Real mean = 0.0L;
    for (std::size_t i = 0; i < g; ++i) mean += w[i] * gw[i];
    std::vector<Real> out(g);
    for (std::size_t i = 0; i < g; ++i) out[i] = w[i] * (gw[i] - mean);
    return out;
  }
};

inline Real max_abs(const std::vector<Real>& v) {
  Real m = 0.0L;
  for (Real x : v) m = std::max(m, std::abs(x));
  return m;
}

/// PSD Gauss-Newton Hessian of J in z at masses w:
///   diag(w) - w w^T + (1 / 2h) B^T H_C B  (+ w w^T to fix the softmax gauge),
/// where B = dC/dz has rows w_j ([j < k] - C_k) and H_C is the tridiagonal
/// Hessian of W2^2 in the interior cumulative masses, taken by forward
/// differences in three colors. Cells too light to resolve in the cumulative
/// sums get no W2 curvature.
inline Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic> gauss_newton_hessian(
    const JkoProblem& problem, const std::vector<Real>& w) {
  const std::size_t g = w.size();
  const Quantile cur(w, problem.left, problem.dx);
  std::vector<Real> base;
  w2_piecewise(cur, problem.prev, &base, &problem.prev_reflected);
  // hc_diag[k], hc_off[k] = H_C(k, k + 1) for k = 1..G-1.
  const std::vector<Real>& cdf = cur.cdf;
  std::vector<Real> hc_diag(g + 1, 0.0L), hc_off(g + 1, 0.0L);
  std::vector<Real> up(g + 1, 0.0L), down(g + 1, 0.0L);
  for (std::size_t color = 0; color < 3; ++color) {
    std::vector<Real> pert(w);
    std::vector<Real> eps(g + 1, 0.0L);
    bool any = false;
    for (std::size_t k = 1 + color; k < g; k += 3) {
      const Real lighter = std::min(w[k - 1], w[k]);
      if (lighter < 1e-30L) continue;
      // W2 is only piecewise quadratic in C: its pieces change where C_k
      // crosses a breakpoint of prev, so stay on the current piece. Measure
      // the gap from whichever end resolves C_k better.
      const bool from_left = cdf[k] <= 0.5L;
      const std::vector<Real>& mine = from_left ? cur.cdf : cur.sf;
      const std::vector<Real>& theirs = from_left ? problem.prev.cdf : problem.prev.sf;
      Real gap = std::numeric_limits<Real>::infinity();
      for (std::size_t m = 0; m < theirs.size(); ++m) {
        gap = std::min(gap, std::abs(theirs[m] - mine[k]));
      }
      eps[k] = std::max(std::min(1e-4L * lighter, 0.25L * gap), 1e-12L * lighter);
      pert[k - 1] += eps[k];
      pert[k] -= eps[k];
      any = true;
    }
    if (!any) continue;
    const Quantile q(pert, problem.left, problem.dx);
    std::vector<Real> moved;
    w2_piecewise(q, problem.prev, &moved, &problem.prev_reflected);
    for (std::size_t k = 1 + color; k < g; k += 3) {
      if (eps[k] == 0.0L) continue;
      hc_diag[k] = (moved[k] - base[k]) / eps[k];
      if (k >= 2) up[k - 1] = (moved[k - 1] - base[k - 1]) / eps[k];  // H(k-1, k)
      if (k + 1 < g) down[k] = (moved[k + 1] - base[k + 1]) / eps[k];  // H(k+1, k)
    }
  }
  for (std::size_t k = 1; k + 1 < g; ++k) {
    const bool have_up = up[k] != 0.0L, have_down = down[k] != 0.0L;
    if (have_up && have_down) {
      hc_off[k] = 0.5L * (up[k] + down[k]);
    } else {
      hc_off[k] = have_up ? up[k] : down[k];
    }
  }
  // Y = H_C P with P(k, i) = [i < k] - C_k, then P^T Y through suffix sums.
  const auto n = static_cast<Eigen::Index>(g);
  Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic> out(n, n);
  std::vector<Real> y(g + 1);
  const auto p = [&](std::size_t k, std::size_t i) {
    return (i < k ? 1.0L : 0.0L) - cdf[k];
  };
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t k = 1; k < g; ++k) {
      Real v = hc_diag[k] * p(k, i);
      if (k >= 2) v += hc_off[k - 1] * p(k - 1, i);
      if (k + 1 < g) v += hc_off[k] * p(k + 1, i);
      y[k] = v;
    }
    Real weighted = 0.0L;
    for (std::size_t k = 1; k < g; ++k) weighted += cdf[k] * y[k];
    Real suffix = 0.0L;  // sum over k > j of y[k]
    for (std::size_t j = g; j-- > 0;) {
      if (j + 1 < g) suffix += y[j + 1];
      out(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = suffix - weighted;
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      out(j, i) *= problem.inv_2h * w[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(i)];
    }
  }
  out = (0.5L * (out + out.transpose())).eval();
  for (Eigen::Index i = 0; i < n; ++i) out(i, i) += w[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace detail

/// One JKO step: argmin over grid densities rho of
///   KL(rho || p) + W2^2(prev, rho) / (2 h)
/// with W2 evaluated exactly through the quantile coupling of the
/// piecewise-constant densities. Masses are parameterized as softmax(z), the
/// mirror (entropic) coordinates of the simplex, so positivity and unit mass
/// hold by construction. Each iteration takes a damped Newton step in z with a
/// central-difference Hessian and an Armijo backtracking line search; the
/// objective never increases. Stops when max |dJ/dz| or the Newton decrement
/// sqrt(g^T H^-1 g) reaches the tolerance.
/// `log_target` is the unnormalized log-density at cell centers.
inline GridDensity jko_step_1d(const GridDensity& prev, const std::vector<double>& log_target,
                               double h, const JkoOptions& options = {},
                               JkoReport* report = nullptr) {
  using detail::Real;
  using RealMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using RealVector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  require(h > 0.0 && std::isfinite(h), "jko_step_1d: h must be positive");
  const Grid1D& grid = prev.grid();
  const std::size_t g = grid.cells();
  require(log_target.size() == g, "jko_step_1d: target size differs from grid");
  for (double v : log_target) {
    require(std::isfinite(v), "jko_step_1d: target log-density not finite");
  }

  const Real dx = static_cast<Real>(grid.spacing());
  const Real left = static_cast<Real>(grid.left());
  std::vector<Real> prev_mass(g);
  for (std::size_t i = 0; i < g; ++i) prev_mass[i] = static_cast<Real>(prev[i]) * dx;

  const double top = *std::max_element(log_target.begin(), log_target.end());
  Real zsum = 0.0L;
  for (double v : log_target) zsum += std::exp(static_cast<Real>(v - top));
  std::vector<Real> log_pi(g);
  for (std::size_t i = 0; i < g; ++i) {
    log_pi[i] = static_cast<Real>(log_target[i] - top) - std::log(zsum);
  }

  const detail::Quantile prev_q(prev_mass, left, dx);
  const detail::JkoProblem problem{prev_q, prev_q.reflected(), log_pi,
                                   1.0L / (2.0L * static_cast<Real>(h)), left, dx};

  const Real largest = *std::max_element(prev_mass.begin(), prev_mass.end());
  const Real floor = largest * static_cast<Real>(options.relative_floor);
  std::vector<Real> z(g);
  for (std::size_t i = 0; i < g; ++i) z[i] = std::log(std::max(prev_mass[i], floor));

  JkoReport rep;
  Real value = problem.objective(z);
  rep.objective_history.push_back(static_cast<double>(value));
  Real damping = 0.0L;
  Real radius = 1.0L;
  const auto n = static_cast<Eigen::Index>(g);

  for (std::size_t iter = 0;; ++iter) {
    const std::vector<Real> grad = problem.gradient(z);
    const Real station = detail::max_abs(grad);
    rep.stationarity = static_cast<double>(station);
    rep.iterations = iter;
    if (station <= static_cast<Real>(options.tolerance)) break;
    if (iter >= options.max_iterations) {
      if (report) *report = rep;
      throw SolverError("jko_step_1d: no convergence after " + std::to_string(iter) +
                            " iterations (stationarity " + std::to_string(rep.stationarity) + ")",
                        static_cast<double>(value));
    }

    const std::vector<Real> w = detail::JkoProblem::softmax(z);
    const RealMatrix ggn = detail::gauss_newton_hessian(problem, w);
    RealVector rhs(n);
    for (Eigen::Index i = 0; i < n; ++i) rhs[i] = -grad[static_cast<std::size_t>(i)];
    {
      // Newton decrement in the (positive definite) Gauss-Newton metric:
      // once it is below tolerance the predicted decrease lambda^2 / 2 is
      // under the resolution of J itself.
      const Eigen::LDLT<RealMatrix> metric(ggn);
      if (metric.info() == Eigen::Success) {
        const Real lambda2 = rhs.dot(metric.solve(rhs));
        if (std::isfinite(lambda2) && lambda2 >= 0.0L) {
          rep.newton_decrement = static_cast<double>(std::sqrt(lambda2));
          if (std::sqrt(lambda2) <= static_cast<Real>(options.tolerance)) break;
        }
      }
    }
    // Softmax curvature diag(v) - w v^T - v w^T (v = dJ/dz) vanishes at the
    // optimum; only its positive diagonal is kept so the model stays convex.
    // That part is what tells a nearly empty cell that the cost of filling it
    // grows exponentially in z.
    RealMatrix hess = ggn;
    for (Eigen::Index i = 0; i < n; ++i) {
      hess(i, i) += std::max(grad[static_cast<std::size_t>(i)], 0.0L);
    }

    // Levenberg-Marquardt shift (scaled by the KL curvature diag(w)) until the
    // system is positive definite, a cap of `radius` on every log-mass change,
    // then Armijo backtracking.
    bool accepted = false;
    damping = damping * 0.1L;
    for (int attempt = 0; attempt < 60 && !accepted; ++attempt) {
      RealMatrix shifted = hess;
      for (Eigen::Index i = 0; i < n; ++i) {
        shifted(i, i) += damping * w[static_cast<std::size_t>(i)];
      }
      const Eigen::LDLT<RealMatrix> ldlt(shifted);
      RealVector d;
      Real slope = 0.0L;
      // Pivots of nearly empty cells can round to zero; the descent test
      // below is the real guard.
      bool usable = ldlt.info() == Eigen::Success;
      if (usable) {
        d = ldlt.solve(rhs);
        const Real longest = d.cwiseAbs().maxCoeff();
        if (longest > radius) d *= radius / longest;
        slope = -rhs.dot(d);
        usable = d.allFinite() && slope < 0.0L;
      }
      if (usable) {
        Real t = 1.0L;
        for (int backtrack = 0; backtrack < 40; ++backtrack, t *= 0.5L) {
          std::vector<Real> trial(z);
          for (Eigen::Index i = 0; i < n; ++i) trial[static_cast<std::size_t>(i)] += t * d[i];
          const Real trial_value = problem.objective(trial);
          // Below the resolution of J the Armijo test is noise; a
          // non-increasing value is all that can be asked.
          const bool unresolved =
              -t * slope <= 256.0L * std::numeric_limits<Real>::epsilon() * std::abs(value);
          const bool armijo = trial_value <= value + 1e-4L * t * slope;
          if (std::isfinite(trial_value) && (armijo || (unresolved && trial_value <= value))) {
            z = std::move(trial);
            value = trial_value;
            accepted = true;
            const Real moved = t * d.cwiseAbs().maxCoeff();
            radius = t == 1.0L ? std::min<Real>(2.0L * radius, 64.0L)
                               : std::max<Real>(moved, 1e-2L);
            break;
          }
        }
      }
      if (!accepted) damping = damping == 0.0L ? 1e-6L : damping * 10.0L;
    }
    if (!accepted) {
      if (report) *report = rep;
      throw SolverError("jko_step_1d: line search failed (stationarity " +
                            std::to_string(rep.stationarity) + ")",
                        static_cast<double>(value));
    }
    if (static_cast<double>(value) > rep.objective_history.back()) {
      throw SolverError("jko_step_1d: objective increased", static_cast<double>(value));
    }
    rep.objective_history.push_back(static_cast<double>(value));
  }

  const std::vector<Real> w = detail::JkoProblem::softmax(z);
  std::vector<double> density(g);
  for (std::size_t i = 0; i < g; ++i) density[i] = static_cast<double>(w[i] / dx);
  if (report) *report = rep;
  return GridDensity::normalized(grid, std::move(density));
}

/// K successive JKO steps of size h.
inline GridDensity jko_flow_1d(const GridDensity& init, const std::vector<double>& log_target,
                               double h, std::size_t steps, const JkoOptions& options = {}) {
  GridDensity rho = init;
  for (std::size_t k = 0; k < steps; ++k) rho = jko_step_1d(rho, log_target, h, options);
  return rho;
}

}  // namespace posteriorflow
