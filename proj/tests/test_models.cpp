#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "posteriorflow/dataset.hpp"
#include "posteriorflow/experiment.hpp"
#include "posteriorflow/kernels.hpp"
#include "posteriorflow/rng.hpp"
#include "posteriorflow/stein.hpp"
#include "posteriorflow/targets.hpp"

namespace pf = posteriorflow;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& body) {
  const fs::path dir = fs::temp_directory_path() / "pf_test_models";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream(p) << body;
  return p;
}

pf::Vector random_vector(pf::rng::Stream& s, Eigen::Index r, double scale) {
  pf::Vector v(r);
  for (Eigen::Index t = 0; t < r; ++t) v[t] = scale * s.normal();
  return v;
}

}  // namespace

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  pf::rng::Stream a(7, pf::rng::Purpose::kNoise, 3, 1);
  pf::rng::Stream b(7, pf::rng::Purpose::kNoise, 3, 1);
  pf::rng::Stream c(7, pf::rng::Purpose::kNoise, 3, 2);
  for (int i = 0; i < 10; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
  }
  EXPECT_NE(pf::rng::derive_key(1, pf::rng::Purpose::kInit, 0, 0),
            pf::rng::derive_key(1, pf::rng::Purpose::kNoise, 0, 0));
}

TEST(Rng, NormalMomentsAndUniformRange) {
  pf::rng::Stream s(11, pf::rng::Purpose::kTest, 0, 0);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = s.normal();
    sum += x;
    sq += x * x;
    const double u = s.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.015);
}

TEST(Dataset, CsvWithHeaderAndBias) {
  const auto p = temp_file("d.csv", "label,x1,x2\n1,0.5,2\n-1,1.5,-3\n");
  const auto d = pf::load_csv(p.string(), true);
  ASSERT_EQ(d.size(), 2u);
  ASSERT_EQ(d.dimension(), 3u);
  EXPECT_EQ(d.label(1), -1.0);
  EXPECT_EQ(d.row(1)[1], -3.0);
  EXPECT_EQ(d.row(0)[2], 1.0);
}

TEST(Dataset, CsvErrorsNameTheLine) {
  const auto p = temp_file("bad.csv", "1,0.5,2\n-1,1.5\n");
  try {
    pf::load_csv(p.string(), false);
    FAIL() << "expected ContractViolation";
  } catch (const pf::ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(pf::load_csv(temp_file("lab.csv", "2,1\n").string(), false), pf::ContractViolation);
}

TEST(Dataset, LibsvmSparseRows) {
  const auto p = temp_file("d.svm", "+1 1:0.5 3:2\n-1 2:1\n");
  const auto d = pf::load_libsvm(p.string(), false);
  ASSERT_EQ(d.dimension(), 3u);
  EXPECT_EQ(d.row(0)[1], 0.0);
  EXPECT_EQ(d.row(0)[2], 2.0);
  EXPECT_EQ(d.row(1)[1], 1.0);
  EXPECT_EQ(pf::load_libsvm(p.string(), false, 5).dimension(), 5u);
}

TEST(Minibatch, EachEpochCoversEveryIndexOnce) {
  pf::MinibatchSchedule sched(10, 3, 4);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    std::size_t sizes = 0;
    for (int b = 0; b < 4; ++b) {
      const auto batch = sched.next();
      sizes += batch.size();
      seen.insert(batch.begin(), batch.end());
    }
    EXPECT_EQ(sizes, 10u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
  }
}

TEST(Targets, PotentialHandValues) {
  const auto g = pf::GaussianTarget::standard(1);
  EXPECT_DOUBLE_EQ(g.potential_energy(pf::Vector::Zero(1)), 0.0);
  EXPECT_DOUBLE_EQ(g.potential_energy(pf::Vector::Constant(1, 2.0)), 2.0);
  pf::FeatureMatrix x(1, 1);
  x << 1.0;
  pf::Vector y(1);
  y << 1.0;
  const pf::LogisticRegressionTarget lr(pf::Dataset(x, y), 0.0);
  EXPECT_NEAR(lr.potential_energy(pf::Vector::Zero(1)), std::log(2.0), 1e-15);
}

TEST(Targets, GaussianScoreIsMinusTheta) {
  const auto g = pf::GaussianTarget::standard(4);
  pf::Vector theta(4);
  theta << 1.0, -2.0, 0.5, 3.0;
  EXPECT_TRUE(g.grad_log_posterior(theta).isApprox(-theta));
}

TEST(Targets, MixtureScoreVanishesAtMidpoint) {
  const auto m = pf::GaussianMixtureTarget::symmetric_pair(3, 2.0);
  EXPECT_LE(m.grad_log_posterior(pf::Vector::Zero(3)).norm(), 1e-15);
}

TEST(Targets, GradientsMatchFiniteDifferences) {
  const auto data = pf::synth_logistic(100, 4, 2);
  const pf::LogisticRegressionTarget lr(data.train, 0.1);
  const auto gauss = pf::GaussianTarget::isotropic(pf::Vector::Constant(2, 1.0), 0.5);
  const auto mix = pf::GaussianMixtureTarget::symmetric_pair(2, 1.0);
  const pf::DoubleWellTarget well(0.25);
  const pf::TargetModel* models[] = {&lr, &gauss, &mix, &well};
  pf::rng::Stream s(5, pf::rng::Purpose::kTest, 0, 0);
  for (const auto* model : models) {
    for (int k = 0; k < 100; ++k) {
      const auto theta = random_vector(s, static_cast<Eigen::Index>(model->dimension()), 1.0);
      const auto g = model->grad_log_posterior(theta);
      const auto fd = oracle::fd_gradient(
          [&](const oracle::Vec& t) { return -model->potential_energy(t); }, theta);
      EXPECT_LE((g - fd).norm() / std::max(1.0, fd.norm()), 1e-5) << model->name();
    }
  }
}

TEST(Targets, MinibatchGradientIsUnbiasedByEnumeration) {
  const auto data = pf::synth_logistic(10, 3, 8);
  const pf::Dataset six(data.train.features().topRows(6), data.train.labels().head(6));
  const pf::LogisticRegressionTarget lr(six, 0.3);
  pf::rng::Stream s(9, pf::rng::Purpose::kTest, 0, 0);
  for (int k = 0; k < 10; ++k) {
    const auto theta = random_vector(s, 3, 1.0);
    pf::Vector sum = pf::Vector::Zero(3);
    int count = 0;
    oracle::for_each_subset(6, 2, [&](const std::vector<std::size_t>& b) {
      sum += lr.stochastic_grad(theta, b);
      ++count;
    });
    ASSERT_EQ(count, 15);
    EXPECT_LE((sum / 15.0 - lr.grad_log_posterior(theta)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Targets, FullBatchAndAnalyticBatchesAreExact) {
  const auto data = pf::synth_logistic(20, 2, 1);
  const pf::LogisticRegressionTarget lr(data.train, 0.1);
  std::vector<std::size_t> all(lr.dataset_size());
  std::iota(all.begin(), all.end(), 0);
  const pf::Vector theta = pf::Vector::Constant(2, 0.3);
  EXPECT_EQ(lr.stochastic_grad(theta, all), lr.grad_log_posterior(theta));
  const auto g = pf::GaussianTarget::standard(2);
  const std::vector<std::size_t> junk = {99, 1000};
  EXPECT_EQ(g.stochastic_grad(theta, junk), g.grad_log_posterior(theta));
}

TEST(Targets, ShapeMismatchIsAContractViolation) {
  const auto g = pf::GaussianTarget::standard(2);
  EXPECT_THROW(g.grad_log_posterior(pf::Vector::Zero(3)), pf::ContractViolation);
}

TEST(LogisticMetrics, ZeroParticleGivesHalf) {
  const auto data = pf::synth_logistic(50, 3, 4);
  const pf::LogisticRegressionTarget lr(data.train);
  const pf::ParticleSet zero = pf::ParticleSet::Zero(1, 3);
  const auto m = pf::logistic_metrics(lr, zero, data.test);
  EXPECT_NEAR(m.mean_log_likelihood, -std::log(2.0), 1e-15);
  pf::ParticleSet same(4, 3);
  for (int i = 0; i < 4; ++i) same.row(i) << 0.2, -0.1, 0.7;
  const auto a = pf::logistic_metrics(lr, same, data.test);
  const auto b = pf::logistic_metrics(lr, same.topRows(1), data.test);
  EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.mean_log_likelihood, b.mean_log_likelihood, 1e-14);
}

TEST(LogisticMetrics, TwoParticlesMatchBruteForce) {
  pf::FeatureMatrix x(3, 2);
  x << 1.0, 0.5, -2.0, 1.0, 0.3, -0.4;
  pf::Vector y(3);
  y << 1.0, 1.0, -1.0;
  const pf::Dataset test(x, y);
  const pf::LogisticRegressionTarget lr(test);
  pf::ParticleSet p(2, 2);
  p << 0.8, -1.2, -0.5, 2.0;
  const auto got = pf::logistic_metrics(lr, p, test);
  const auto want = oracle::logistic_predictive(p, x, y);
  EXPECT_DOUBLE_EQ(got.accuracy, want.accuracy);
  EXPECT_NEAR(got.mean_log_likelihood, want.mean_log_likelihood, 1e-14);
}

TEST(Kernels, RbfValuesAndSymmetry) {
  const pf::RbfKernel k(1.0);
  pf::Vector x(2), y(2);
  x << 1.0, 2.0;
  y << 1.0, 3.0;
  EXPECT_DOUBLE_EQ(pf::rbf_eval(k, x, x), 1.0);
  EXPECT_NEAR(pf::rbf_eval(k, x, y), std::exp(-1.0), 1e-16);
  pf::rng::Stream s(3, pf::rng::Purpose::kTest, 0, 0);
  const pf::RbfKernel k2(2.5);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_vector(s, 3, 1.0);
    const auto b = random_vector(s, 3, 1.0);
    EXPECT_EQ(pf::rbf_eval(k2, a, b), pf::rbf_eval(k2, b, a));
    EXPECT_TRUE(pf::rbf_grad_x(k2, a, b).isApprox(-pf::rbf_grad_x(k2, b, a)));
    const auto fd = oracle::fd_gradient(
        [&](const oracle::Vec& t) { return pf::rbf_eval(k2, t, b); }, a);
    EXPECT_LE((pf::rbf_grad_x(k2, a, b) - fd).norm() / std::max(1e-3, fd.norm()), 1e-6);
  }
  EXPECT_EQ(pf::rbf_grad_x(k2, x, x).norm(), 0.0);
}

TEST(Kernels, MedianHeuristicHandCases) {
  pf::ParticleSet p(3, 1);
  p << 0.0, 1.0, 2.0;
  EXPECT_NEAR(pf::median_heuristic(p), 1.0 / std::log(4.0), 1e-15);
  EXPECT_EQ(pf::median_heuristic(pf::ParticleSet::Zero(1, 2)), 1.0);
  EXPECT_EQ(pf::median_heuristic(pf::ParticleSet::Constant(5, 2, 3.0)), 1.0);
  pf::rng::Stream s(1, pf::rng::Purpose::kTest, 0, 0);
  pf::ParticleSet q(9, 2);
  for (int i = 0; i < 9; ++i) q.row(i) = random_vector(s, 2, 1.0).transpose();
  EXPECT_NEAR(pf::median_heuristic(q), oracle::median_bandwidth(q), 1e-15);
}

TEST(Stein, SingleParticleIsTheScore) {
  const auto g = pf::GaussianTarget::standard(2);
  pf::ParticleSet p(1, 2);
  p << 0.5, -1.5;
  pf::ParticleSet s(1, 2);
  s.row(0) = g.grad_log_posterior(p.row(0).transpose()).transpose();
  const auto phi = pf::stein_direction(p, pf::RbfKernel(0.7), s);
  EXPECT_TRUE(phi.isApprox(s));
}

TEST(Stein, TwoParticleHandRow) {
  // theta = {-1, +1}, scores {1, -1}, bw2 = 1: k(-1, 1) = e^-4.
  pf::ParticleSet p(2, 1);
  p << -1.0, 1.0;
  pf::ParticleSet s(2, 1);
  s << 1.0, -1.0;
  const auto phi = pf::stein_direction(p, pf::RbfKernel(1.0), s);
  const double e4 = std::exp(-4.0);
  // row 0: [1 * 1 + e4 * (-1)]/2 + [0 + (-2 * e4 * (1 - (-1)))]/2
  const double row0 = 0.5 * (1.0 - e4) + 0.5 * (-4.0 * e4);
  EXPECT_NEAR(phi(0, 0), row0, 1e-15);
  EXPECT_NEAR(phi(1, 0), -row0, 1e-15);
}

TEST(Stein, MatchesOracleAndIsPermutationEquivariant) {
  pf::rng::Stream s(4, pf::rng::Purpose::kTest, 0, 0);
  const auto g = pf::GaussianMixtureTarget::symmetric_pair(3, 1.0);
  pf::ParticleSet p(7, 3), sc(7, 3);
  for (int i = 0; i < 7; ++i) {
    p.row(i) = random_vector(s, 3, 1.5).transpose();
    sc.row(i) = g.grad_log_posterior(p.row(i).transpose()).transpose();
  }
  const double bw2 = 1.3;
  const auto phi = pf::stein_direction(p, pf::RbfKernel(bw2), sc);
  EXPECT_LE((phi - oracle::stein_direction(p, sc, bw2)).cwiseAbs().maxCoeff(), 1e-14);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(7);
  perm.indices() << 3, 0, 6, 1, 5, 2, 4;
  const pf::ParticleSet pp = perm * p;
  const pf::ParticleSet ps = perm * sc;
  const pf::ParticleSet want = perm * phi;
  EXPECT_LE((pf::stein_direction(pp, pf::RbfKernel(bw2), ps) - want).cwiseAbs().maxCoeff(),
            1e-14);
}

TEST(Stein, KsdTwoPointsMatchesScalarKernel) {
  const auto g = pf::GaussianTarget::standard(1);
  pf::ParticleSet p(2, 1);
  p << -0.3, 1.1;
  const double bw2 = 0.8;
  const double u = oracle::stein_kernel_1d(-0.3, 1.1, 0.3, -1.1, bw2);
  EXPECT_NEAR(pf::ksd_u_statistic(p, g, pf::RbfKernel(bw2)), u, 1e-15);
}

TEST(Stein, KsdSeparatesTargetFromTail) {
  // Calibration over seeds 0..9: |near| <= 0.011, tail >= 24.9.
  const auto g = pf::GaussianTarget::standard(1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    pf::rng::Stream s(seed, pf::rng::Purpose::kTest, 0, 0);
    pf::ParticleSet near(1000, 1), tail(1000, 1);
    for (int i = 0; i < 1000; ++i) {
      near(i, 0) = s.normal();
      tail(i, 0) = 10.0 + 0.1 * s.normal();
    }
    const double k_near =
        pf::ksd_u_statistic(near, g, pf::RbfKernel(pf::median_heuristic(near)));
    const double k_tail =
        pf::ksd_u_statistic(tail, g, pf::RbfKernel(pf::median_heuristic(tail)));
    EXPECT_LT(std::abs(k_near), 0.05);
    EXPECT_GT(k_tail, 10.0 * 0.05);
  }
}
