#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "posteriorflow/experiment.hpp"
#include "posteriorflow/validation.hpp"

namespace pf = posteriorflow;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pf_exp_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& body) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }

  fs::path synth_data() {
    std::ostringstream log;
    EXPECT_EQ(pf::cmd_synth("logistic", 200, 3, 1, dir_ / "data", log), 0) << log.str();
    return dir_ / "data";
  }

  fs::path dir_;
};

const char* kGaussianConfig =
    "# small analytic run\n"
    "target.kind = gaussian\n"
    "target.dim = 2\n"
    "run.samplers = sgld, po_sgmcmc\n"
    "run.seeds = 1, 2, 3\n"
    "run.iterations = 20\n"
    "run.hook_every = 5\n"
    "run.output = out\n"
    "sampler.particles = 6\n"
    "sampler.stepsize = 0.05\n"
    "sampler.po_sgmcmc.momentum = 0.2\n";

}  // namespace

TEST(ConfigParse, CommentsDuplicatesAndLines) {
  auto cfg = pf::ConfigFile::parse("a = 1 # trailing\n\n# full\nb.c=two words\n", "x.cfg");
  EXPECT_EQ(cfg.text("a").value(), "1");
  EXPECT_EQ(cfg.text("b.c").value(), "two words");
  EXPECT_THROW(pf::ConfigFile::parse("a=1\na=2\n", "x"), pf::ConfigError);
  try {
    pf::ConfigFile::parse("a=1\nnot a pair\n", "x.cfg");
    FAIL();
  } catch (const pf::ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("x.cfg:2:", 0), 0u) << e.what();
  }
  auto bad = pf::ConfigFile::parse("n = 1.5\nr = abc\n", "y.cfg");
  EXPECT_THROW(bad.count("n", 0), pf::ConfigError);
  EXPECT_THROW(bad.real("r", 0.0), pf::ConfigError);
}

TEST_F(ExperimentTest, ResolveReportsFieldAndLine) {
  const auto p = write("c.cfg", "target.kind = gaussian\nrun.samplers = sgld\nsampler.stepsize = -1\n");
  auto cfg = pf::ConfigFile::load(p);
  try {
    pf::resolve_config(cfg, dir_);
    FAIL();
  } catch (const pf::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stepsize"), std::string::npos) << e.what();
  }
  auto typo = pf::ConfigFile::parse("target.kind = gaussian\nrun.samplers = sgld\nrun.iteratons = 4\n",
                                    "t.cfg");
  try {
    pf::resolve_config(typo, dir_);
    FAIL();
  } catch (const pf::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t.cfg:3: run.iteratons"), std::string::npos) << e.what();
  }
  auto seeds = pf::ConfigFile::parse("target.kind = gaussian\nrun.samplers = sgld\nrun.seeds = 1,1\n", "s");
  EXPECT_THROW(pf::resolve_config(seeds, dir_), pf::ConfigError);
  auto none = pf::ConfigFile::parse("target.kind = gaussian\n", "n");
  EXPECT_THROW(pf::resolve_config(none, dir_), pf::ConfigError);
  auto missing = pf::ConfigFile::parse(
      "target.kind = logistic\ntarget.train = nope.csv\ntarget.test = nope.csv\nrun.samplers = svgd\n", "m");
  EXPECT_THROW(pf::resolve_config(missing, dir_), pf::ConfigError);
}

TEST_F(ExperimentTest, RunWritesTracesAndManifest) {
  const auto cfg = write("g.cfg", kGaussianConfig);
  std::ostringstream log;
  ASSERT_EQ(pf::cmd_run(cfg, log), 0) << log.str();
  int traces = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "out")) {
    if (e.path().extension() == ".csv") ++traces;
    EXPECT_NE(e.path().extension(), ".tmp");
  }
  EXPECT_EQ(traces, 6);
  const std::string t = slurp(dir_ / "out" / "po_sgmcmc_2.csv");
  EXPECT_EQ(t.rfind("iteration,metric,value\n5,mean_error,", 0), 0u) << t;
  const std::string manifest = slurp(dir_ / "out" / "manifest.txt");
  EXPECT_NE(manifest.find("sampler.po_sgmcmc.momentum = 0.20000000000000001"), std::string::npos);
  EXPECT_NE(manifest.find("sampler.sgld.stepsize = 0.050000000000000003"), std::string::npos);

  // Rerun: byte-identical output.
  const std::string first = slurp(dir_ / "out" / "sgld_3.csv");
  ASSERT_EQ(pf::cmd_run(cfg, log), 0);
  EXPECT_EQ(slurp(dir_ / "out" / "sgld_3.csv"), first);
}

TEST_F(ExperimentTest, ZeroIterationsGiveHeaderOnlyTraces) {
  std::string body = kGaussianConfig;
  body.replace(body.find("run.iterations = 20"), 19, "run.iterations = 0");
  const auto cfg = write("z.cfg", body);
  std::ostringstream log;
  ASSERT_EQ(pf::cmd_run(cfg, log), 0) << log.str();
  EXPECT_EQ(slurp(dir_ / "out" / "sgld_1.csv"), "iteration,metric,value\n");
  EXPECT_TRUE(fs::exists(dir_ / "out" / "manifest.txt"));
}

TEST_F(ExperimentTest, ConfigErrorExitsOneDivergenceExitsTwo) {
  std::ostringstream log;
  EXPECT_EQ(pf::cmd_run(write("bad.cfg", "target.kind = nonsense\n"), log), 1);
  EXPECT_NE(log.str().find("bad.cfg:1: target.kind"), std::string::npos) << log.str();
  const auto cfg = write("div.cfg",
                         "target.kind = gaussian\nrun.samplers = sgld\nrun.iterations = 2000\n"
                         "run.output = out\nsampler.stepsize = 40\n");
  std::ostringstream log2;
  EXPECT_EQ(pf::cmd_run(cfg, log2), 2);
  const std::string trace = slurp(dir_ / "out" / "sgld_0.csv");
  EXPECT_GT(std::count(trace.begin(), trace.end(), '\n'), 1);
}

TEST_F(ExperimentTest, LogisticRunAndCompareRoundTrip) {
  const auto data = synth_data();
  const auto cfg = write("l.cfg",
                         "target.kind = logistic\ntarget.train = data/train.csv\n"
                         "target.test = data/test.csv\nrun.samplers = svgd, po_sgmcmc\n"
                         "run.seeds = 4, 5, 6\nrun.iterations = 30\nrun.hook_every = 10\n"
                         "run.metrics = accuracy, log_likelihood, ksd, w2_step\n"
                         "sampler.stepsize = 0.005\nsampler.particles = 8\n"
                         "compare.threshold.accuracy = 0.6\n");
  std::ostringstream log;
  ASSERT_EQ(pf::cmd_run(cfg, log), 0) << log.str();
  ASSERT_EQ(pf::cmd_compare(dir_ / "out", log), 0) << log.str();
  const std::string summary = slurp(dir_ / "out" / "summary.csv");
  EXPECT_EQ(summary.rfind("sampler,metric,iteration,median,q25,q75,iqr,seeds,threshold,"
                          "iterations_to_threshold\n",
                          0),
            0u);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "plot_accuracy.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "out" / "plot_ksd.csv"));

  // Recompute one summary row from the raw traces.
  std::vector<double> values;
  for (int seed : {4, 5, 6}) {
    const auto t = pf::read_trace(dir_ / "out" / ("svgd_" + std::to_string(seed) + ".csv"));
    for (const auto& [it, mv] : t.rows) {
      if (it == 20 && mv.first == "log_likelihood") values.push_back(mv.second);
    }
  }
  ASSERT_EQ(values.size(), 3u);
  const std::string row = "svgd,log_likelihood,20," + pf::format_real(oracle::quantile(values, 0.5)) + "," +
                          pf::format_real(oracle::quantile(values, 0.25)) + ",";
  EXPECT_NE(summary.find(row), std::string::npos) << row << "\n" << summary;
  EXPECT_NE(slurp(dir_ / "out" / "thresholds.csv").find("svgd,4,accuracy,0.59999999999999998,"),
            std::string::npos);
}

TEST(Compare, MedianIqrAndThresholdSentinel) {
  std::vector<pf::TraceFile> traces;
  const double vals[] = {1.0, 2.0, 9.0};
  for (int s = 0; s < 3; ++s) {
    pf::TraceFile t;
    t.sampler = "po_sgmcmc";
    t.seed = static_cast<std::uint64_t>(s);
    t.rows = {{10, {"accuracy", 0.1 * s}}, {20, {"accuracy", vals[s]}}};
    traces.push_back(t);
  }
  const auto res = pf::compare_traces(traces, {{"accuracy", 100.0, false}});
  EXPECT_NE(res.summary_csv.find("po_sgmcmc,accuracy,20,2,1.5,5.5,4,3,100,-1\n"), std::string::npos)
      << res.summary_csv;
  const auto single = pf::compare_traces({traces[2]}, {{"accuracy", 5.0, false}});
  EXPECT_NE(single.summary_csv.find("po_sgmcmc,accuracy,20,9,9,9,0,1,5,20\n"), std::string::npos)
      << single.summary_csv;
  auto broken = traces;
  broken[1].rows.pop_back();
  EXPECT_THROW(pf::compare_traces(broken, {}), pf::ConfigError);
}

TEST(Compare, MedianIterationsTreatsMissesAsInfinite) {
  EXPECT_EQ(pf::median_iterations({10, -1, 30}), 30.0);
  EXPECT_EQ(pf::median_iterations({10, -1, -1}), -1.0);
  EXPECT_EQ(pf::median_iterations({10, 20}), 15.0);
  EXPECT_EQ(pf::iterations_to_threshold({{5, 0.1}, {10, 0.8}}, {"a", 0.8, false}), 10);
  EXPECT_EQ(pf::iterations_to_threshold({{5, 0.1}, {10, 0.8}}, {"a", 0.2, true}), 5);
}

TEST_F(ExperimentTest, CompareRejectsInconsistentHooks) {
  fs::create_directories(dir_ / "t");
  std::ofstream(dir_ / "t" / "sgld_1.csv") << "iteration,metric,value\n1,a,0.5\n";
  std::ofstream(dir_ / "t" / "sgld_2.csv") << "iteration,metric,value\n1,b,0.5\n";
  std::ostringstream log;
  EXPECT_EQ(pf::cmd_compare(dir_ / "t", log), 1);
  EXPECT_NE(log.str().find("inconsistent hooks"), std::string::npos);
  std::ostringstream log2;
  EXPECT_EQ(pf::cmd_compare(dir_ / "empty_missing", log2), 1);
}

TEST_F(ExperimentTest, SynthIsDeterministicAndBalanced) {
  std::ostringstream log;
  ASSERT_EQ(pf::cmd_synth("logistic", 100, 4, 9, dir_ / "a", log), 0);
  ASSERT_EQ(pf::cmd_synth("logistic", 100, 4, 9, dir_ / "b", log), 0);
  EXPECT_EQ(slurp(dir_ / "a" / "train.csv"), slurp(dir_ / "b" / "train.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "test.csv"), slurp(dir_ / "b" / "test.csv"));
  const auto train = pf::load_csv((dir_ / "a" / "train.csv").string(), false);
  const auto test = pf::load_csv((dir_ / "a" / "test.csv").string(), false);
  EXPECT_EQ(train.size(), 80u);
  EXPECT_EQ(test.size(), 20u);
  EXPECT_EQ(train.dimension(), 4u);
  EXPECT_EQ(slurp(dir_ / "a" / "train.csv").rfind("label,x1,x2,x3,x4\n", 0), 0u);
  EXPECT_EQ(pf::cmd_synth("logistic", 3, 4, 9, dir_ / "c", log), 1);
  EXPECT_EQ(pf::cmd_synth("logistic", 100, 0, 9, dir_ / "c", log), 1);
  EXPECT_EQ(pf::cmd_synth("poisson", 100, 2, 9, dir_ / "c", log), 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = pf::synth_logistic(20, 10, seed);
    const auto& y = d.train.labels();
    EXPECT_TRUE((y.array() > 0).any() && (y.array() < 0).any()) << "seed " << seed;
  }
}

TEST(Synth, MapBaselineBeatsSeventyPercent) {
  const auto d = pf::synth_logistic(1000, 10, 1);
  const pf::LogisticRegressionTarget model(d.train, 0.01);
  // Newton iterations on the log posterior.
  pf::Vector theta = pf::Vector::Zero(10);
  for (int it = 0; it < 25; ++it) {
    pf::Matrix hess = 0.01 * pf::Matrix::Identity(10, 10);
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const pf::Vector x = d.train.row(i).transpose();
      const double s = oracle::sigmoid(x.dot(theta));
      hess += s * (1.0 - s) * x * x.transpose();
    }
    theta += hess.ldlt().solve(model.grad_log_posterior(theta));
  }
  EXPECT_LE(model.grad_log_posterior(theta).norm(), 1e-8);
  pf::ParticleSet one(1, 10);
  one.row(0) = theta.transpose();
  EXPECT_GT(pf::logistic_metrics(model, one, d.test).accuracy, 0.70);
}

TEST(Validate, SuitesPassAndUnknownFails) {
  for (const auto& suite : {"gradcheck", "momentum-equivalence", "lemma2", "fpe"}) {
    std::ostringstream out, err;
    EXPECT_EQ(pf::validation::cmd_validate(suite, out, err), 0) << out.str();
    EXPECT_EQ(out.str().find("FAIL"), std::string::npos) << out.str();
  }
  std::ostringstream out, err;
  EXPECT_EQ(pf::validation::cmd_validate("unknown", out, err), 1);
  EXPECT_NE(err.str().find("momentum-equivalence"), std::string::npos);
}
