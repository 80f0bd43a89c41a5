#pragma once

// Experiment harness behind the command-line tool: flat key=value configs,
// (sampler, seed) orchestration with CSV traces, cross-seed summaries and the
// synthetic logistic data generator.

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "posteriorflow/common.hpp"
#include "posteriorflow/dataset.hpp"
#include "posteriorflow/kernels.hpp"
#include "posteriorflow/metrics.hpp"
#include "posteriorflow/parallel.hpp"
#include "posteriorflow/rng.hpp"
#include "posteriorflow/samplers.hpp"
#include "posteriorflow/stein.hpp"
#include "posteriorflow/targets.hpp"

namespace posteriorflow {

namespace fs = std::filesystem;

/// Bad configuration; carries "source:line: field: message" text.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest round-trip decimal form.
inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes `content` to a sibling temp file and renames it over `path`.
inline void write_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Flat key=value configuration

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

/// `key = value` lines; `#` starts a comment; keys are dotted
/// (`sampler.svgd.stepsize`). A repeated key is an error.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& source) {
    ConfigFile cfg;
    cfg.source_ = source;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
      }
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
      }
      if (cfg.entries_.count(key)) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": " + key +
                          ": duplicate key (first set on line " +
                          std::to_string(cfg.entries_[key].line) + ")");
      }
      cfg.entries_[key] = {value, line_no};
    }
    return cfg;
  }

  static ConfigFile load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  const std::string& source() const { return source_; }
  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }
  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string where(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return source_ + ": " + key;
    return source_ + ":" + std::to_string(it->second.line) + ": " + key;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& message) const {
    throw ConfigError(where(key) + ": " + message);
  }

  std::optional<std::string> text(const std::string& key) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.insert(key);
    return it->second.value;
  }

  std::string required_text(const std::string& key) {
    auto v = text(key);
    if (!v) throw ConfigError(source_ + ": " + key + ": required key is missing");
    return *v;
  }

  double real(const std::string& key, double fallback) {
    const auto v = text(key);
    if (!v) return fallback;
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v->c_str(), &end);
    if (v->empty() || *end != '\0' || errno == ERANGE || !std::isfinite(x)) {
      fail(key, "expected a finite number, got '" + *v + "'");
    }
    return x;
  }

  std::uint64_t count(const std::string& key, std::uint64_t fallback) {
    const auto v = text(key);
    if (!v) return fallback;
    return parse_count(key, *v);
  }

  bool flag(const std::string& key, bool fallback) {
    const auto v = text(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    fail(key, "expected true or false, got '" + *v + "'");
  }

  std::vector<std::string> list(const std::string& key) {
    std::vector<std::string> out;
    const auto v = text(key);
    if (!v) return out;
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) fail(key, "empty list item");
      out.push_back(item);
    }
    return out;
  }

  std::uint64_t parse_count(const std::string& key, const std::string& v) const {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      fail(key, "expected a non-negative integer, got '" + v + "'");
    }
    errno = 0;
    const unsigned long long x = std::strtoull(v.c_str(), nullptr, 10);
    if (errno == ERANGE) fail(key, "integer out of range");
    return static_cast<std::uint64_t>(x);
  }

  /// Keys present in the file but never read.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, e] : entries_) {
      if (!used_.count(k)) out.push_back(k);
    }
    return out;
  }

 private:
  std::string source_;
  std::map<std::string, ConfigEntry> entries_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Resolved experiment

enum class TargetKind { kLogistic, kGaussian, kMixture, kDoubleWell };

struct TargetSpec {
  TargetKind kind = TargetKind::kLogistic;
  fs::path train;
  fs::path test;
  std::string format = "csv";
  bool bias = false;
  double prior_precision = 0.01;
  std::size_t dim = 1;
  double mean = 0.0;
  double variance = 1.0;
  double offset = 2.0;
  double height = 0.25;
};

struct InitConfig {
  std::string kind = "prior";  // prior | gaussian | point
  double mean = 0.0;
  double stddev = 1.0;
};

struct Threshold {
  std::string metric;
  double value;
  bool below;  // reached when value <= threshold instead of >=
};

struct ExperimentConfig {
  TargetSpec target;
  std::vector<SamplerKind> samplers;
  std::map<SamplerKind, SamplerConfig> sampler_configs;
  std::vector<std::uint64_t> seeds;
  std::uint64_t iterations = 0;
  std::uint64_t hook_every = 1;
  std::vector<std::string> metrics;
  InitConfig init;
  fs::path output;
  std::vector<Threshold> thresholds;
};

inline std::vector<std::string> available_metrics(TargetKind kind) {
  switch (kind) {
    case TargetKind::kLogistic: return {"accuracy", "log_likelihood", "ksd", "w2_step"};
    case TargetKind::kGaussian:
    case TargetKind::kMixture: return {"mean_error", "cov_error", "ksd", "w2_step"};
    case TargetKind::kDoubleWell: return {"mean", "second_moment", "ksd", "w2_step"};
  }
  return {};
}

inline std::vector<std::string> default_metrics(TargetKind kind) {
  switch (kind) {
    case TargetKind::kLogistic: return {"accuracy", "log_likelihood"};
    case TargetKind::kGaussian:
    case TargetKind::kMixture: return {"mean_error", "cov_error"};
    case TargetKind::kDoubleWell: return {"mean", "second_moment"};
  }
  return {};
}

inline std::string target_kind_name(TargetKind kind) {
  switch (kind) {
    case TargetKind::kLogistic: return "logistic";
    case TargetKind::kGaussian: return "gaussian";
    case TargetKind::kMixture: return "mixture";
    case TargetKind::kDoubleWell: return "double_well";
  }
  return "unknown";
}

namespace detail {

inline const std::vector<std::string>& sampler_fields() {
  static const std::vector<std::string> fields = {
      "stepsize", "momentum", "noise_scale", "noise_decay", "friction", "batch_size",
      "particles"};
  return fields;
}

inline void apply_sampler_field(ConfigFile& cfg, const std::string& key,
                                const std::string& field, SamplerConfig& sc) {
  if (field == "stepsize") sc.stepsize = cfg.real(key, sc.stepsize);
  else if (field == "momentum") sc.momentum = cfg.real(key, sc.momentum);
  else if (field == "noise_scale") sc.noise_scale = cfg.real(key, sc.noise_scale);
  else if (field == "noise_decay") sc.noise_decay = cfg.real(key, sc.noise_decay);
  else if (field == "friction") sc.friction = cfg.real(key, sc.friction);
  else if (field == "batch_size") sc.batch_size = cfg.count(key, sc.batch_size);
  else if (field == "particles") sc.particles = cfg.count(key, sc.particles);
}

}  // namespace detail

/// Resolves and validates a parsed config. Relative paths are taken from
/// `base_dir` (the config file's directory).
inline ExperimentConfig resolve_config(ConfigFile& cfg, const fs::path& base_dir) {
  ExperimentConfig ex;
  const std::string kind = cfg.required_text("target.kind");
  if (kind == "logistic") {
    ex.target.kind = TargetKind::kLogistic;
    ex.target.train = base_dir / cfg.required_text("target.train");
    ex.target.test = base_dir / cfg.required_text("target.test");
    ex.target.format = cfg.text("target.format").value_or("csv");
    if (ex.target.format != "csv" && ex.target.format != "libsvm") {
      cfg.fail("target.format", "expected csv or libsvm");
    }
    ex.target.bias = cfg.flag("target.bias", false);
    ex.target.prior_precision = cfg.real("target.prior_precision", 0.01);
    if (ex.target.prior_precision < 0.0) cfg.fail("target.prior_precision", "must be >= 0");
    if (!fs::exists(ex.target.train)) {
      cfg.fail("target.train", "file not found: " + ex.target.train.string());
    }
    if (!fs::exists(ex.target.test)) {
      cfg.fail("target.test", "file not found: " + ex.target.test.string());
    }
  } else if (kind == "gaussian" || kind == "mixture") {
    ex.target.kind = kind == "gaussian" ? TargetKind::kGaussian : TargetKind::kMixture;
    ex.target.dim = cfg.count("target.dim", 1);
    if (ex.target.dim == 0) cfg.fail("target.dim", "must be positive");
    if (kind == "gaussian") {
      ex.target.mean = cfg.real("target.mean", 0.0);
      ex.target.variance = cfg.real("target.variance", 1.0);
      if (ex.target.variance <= 0.0) cfg.fail("target.variance", "must be positive");
    } else {
      ex.target.offset = cfg.real("target.offset", 2.0);
    }
  } else if (kind == "double_well") {
    ex.target.kind = TargetKind::kDoubleWell;
    ex.target.height = cfg.real("target.height", 0.25);
    if (ex.target.height <= 0.0) cfg.fail("target.height", "must be positive");
  } else {
    cfg.fail("target.kind", "unknown target '" + kind +
                                "' (expected logistic, gaussian, mixture, double_well)");
  }

  for (const auto& name : cfg.list("run.samplers")) {
    const auto s = parse_sampler(name);
    if (!s) cfg.fail("run.samplers", "unknown sampler '" + name +
                                         "' (expected sgld, sghmc, svgd, po_sgmcmc)");
    if (std::find(ex.samplers.begin(), ex.samplers.end(), *s) != ex.samplers.end()) {
      cfg.fail("run.samplers", "sampler '" + name + "' listed twice");
    }
    ex.samplers.push_back(*s);
  }
  if (ex.samplers.empty()) cfg.fail("run.samplers", "at least one sampler is required");

  for (const auto& s : cfg.list("run.seeds")) ex.seeds.push_back(cfg.parse_count("run.seeds", s));
  if (ex.seeds.empty()) ex.seeds.push_back(0);
  {
    std::set<std::uint64_t> distinct(ex.seeds.begin(), ex.seeds.end());
    if (distinct.size() != ex.seeds.size()) cfg.fail("run.seeds", "seeds must be distinct");
  }
  ex.iterations = cfg.count("run.iterations", 0);
  ex.hook_every = cfg.count("run.hook_every", 1);
  if (ex.hook_every == 0) cfg.fail("run.hook_every", "must be positive");
  ex.output = base_dir / cfg.text("run.output").value_or("out");

  const auto avail = available_metrics(ex.target.kind);
  ex.metrics = cfg.list("run.metrics");
  if (ex.metrics.empty()) ex.metrics = default_metrics(ex.target.kind);
  for (const auto& m : ex.metrics) {
    if (std::find(avail.begin(), avail.end(), m) == avail.end()) {
      std::string names;
      for (const auto& a : avail) names += (names.empty() ? "" : ", ") + a;
      cfg.fail("run.metrics", "metric '" + m + "' is not available for this target (" +
                                  names + ")");
    }
  }
  {
    std::set<std::string> distinct(ex.metrics.begin(), ex.metrics.end());
    if (distinct.size() != ex.metrics.size()) cfg.fail("run.metrics", "metric listed twice");
  }

  ex.init.kind = cfg.text("init.kind").value_or("prior");
  if (ex.init.kind != "prior" && ex.init.kind != "gaussian" && ex.init.kind != "point") {
    cfg.fail("init.kind", "expected prior, gaussian or point");
  }
  ex.init.mean = cfg.real("init.mean", 0.0);
  ex.init.stddev = cfg.real("init.stddev", 1.0);
  if (ex.init.stddev < 0.0) cfg.fail("init.stddev", "must be >= 0");

  SamplerConfig shared;
  for (const auto& field : detail::sampler_fields()) {
    detail::apply_sampler_field(cfg, "sampler." + field, field, shared);
  }
  for (SamplerKind s : ex.samplers) {
    SamplerConfig sc = shared;
    const std::string prefix = "sampler." + std::string(to_string(s)) + ".";
    for (const auto& field : detail::sampler_fields()) {
      detail::apply_sampler_field(cfg, prefix + field, field, sc);
    }
    try {
      sc.validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(cfg.source() + ": " + prefix + "*: " + e.what());
    }
    ex.sampler_configs[s] = sc;
  }

  for (const auto& [key, entry] : cfg.entries()) {
    for (const std::string stem : {"compare.threshold.", "compare.threshold_below."}) {
      if (key.rfind(stem, 0) == 0) {
        const std::string metric = key.substr(stem.size());
        ex.thresholds.push_back({metric, cfg.real(key, 0.0),
                                 stem == std::string("compare.threshold_below.")});
      }
    }
  }
  if (!cfg.has("compare.threshold.accuracy") && ex.target.kind == TargetKind::kLogistic) {
    ex.thresholds.push_back({"accuracy", 0.73, false});
  }

  // Keys nobody read: typos and stale sampler sections.
  for (const auto& key : cfg.unused()) {
    std::string hint;
    if (key.rfind("sampler.", 0) == 0) hint = " (sampler not listed in run.samplers or unknown field)";
    cfg.fail(key, "unknown key" + hint);
  }
  return ex;
}

/// Sorted `key = value` listing of every resolved setting.
inline std::string manifest_text(const ExperimentConfig& ex) {
  std::map<std::string, std::string> kv;
  const auto& t = ex.target;
  kv["target.kind"] = target_kind_name(t.kind);
  switch (t.kind) {
    case TargetKind::kLogistic:
      kv["target.train"] = t.train.lexically_normal().string();
      kv["target.test"] = t.test.lexically_normal().string();
      kv["target.format"] = t.format;
      kv["target.bias"] = t.bias ? "true" : "false";
      kv["target.prior_precision"] = format_real(t.prior_precision);
      break;
    case TargetKind::kGaussian:
      kv["target.dim"] = std::to_string(t.dim);
      kv["target.mean"] = format_real(t.mean);
      kv["target.variance"] = format_real(t.variance);
      break;
    case TargetKind::kMixture:
      kv["target.dim"] = std::to_string(t.dim);
      kv["target.offset"] = format_real(t.offset);
      break;
    case TargetKind::kDoubleWell:
      kv["target.height"] = format_real(t.height);
      break;
  }
  std::string samplers, seeds, metrics;
  for (auto s : ex.samplers) samplers += (samplers.empty() ? "" : ",") + std::string(to_string(s));
  for (auto s : ex.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  for (const auto& m : ex.metrics) metrics += (metrics.empty() ? "" : ",") + m;
  kv["run.samplers"] = samplers;
  kv["run.seeds"] = seeds;
  kv["run.metrics"] = metrics;
  kv["run.iterations"] = std::to_string(ex.iterations);
  kv["run.hook_every"] = std::to_string(ex.hook_every);
  kv["run.output"] = ex.output.lexically_normal().string();
  kv["init.kind"] = ex.init.kind;
  kv["init.mean"] = format_real(ex.init.mean);
  kv["init.stddev"] = format_real(ex.init.stddev);
  for (const auto& [s, sc] : ex.sampler_configs) {
    const std::string p = "sampler." + std::string(to_string(s)) + ".";
    kv[p + "stepsize"] = format_real(sc.stepsize);
    kv[p + "momentum"] = format_real(sc.momentum);
    kv[p + "noise_scale"] = format_real(sc.noise_scale);
    kv[p + "noise_decay"] = format_real(sc.noise_decay);
    kv[p + "friction"] = format_real(sc.friction);
    kv[p + "batch_size"] = std::to_string(sc.batch_size);
    kv[p + "particles"] = std::to_string(sc.particles);
  }
  for (const auto& th : ex.thresholds) {
    kv[(th.below ? "compare.threshold_below." : "compare.threshold.") + th.metric] =
        format_real(th.value);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Targets and hooks

struct LoadedTarget {
  std::unique_ptr<TargetModel> model;
  std::optional<Dataset> test;
  Vector mean;  // reference moments for analytic targets
  Matrix cov;
};

inline LoadedTarget load_target(const TargetSpec& spec) {
  LoadedTarget out;
  switch (spec.kind) {
    case TargetKind::kLogistic: {
      Dataset train = spec.format == "csv" ? load_csv(spec.train.string(), spec.bias)
                                           : load_libsvm(spec.train.string(), spec.bias);
      Dataset test = spec.format == "csv"
                         ? load_csv(spec.test.string(), spec.bias)
                         : load_libsvm(spec.test.string(), spec.bias,
                                       train.dimension() - (spec.bias ? 1 : 0));
      if (test.dimension() != train.dimension()) {
        throw ConfigError(spec.test.string() + ": feature count differs from training set");
      }
      out.model = std::make_unique<LogisticRegressionTarget>(std::move(train),
                                                             spec.prior_precision);
      out.test = std::move(test);
      break;
    }
    case TargetKind::kGaussian: {
      const auto r = static_cast<Eigen::Index>(spec.dim);
      auto g = GaussianTarget::isotropic(Vector::Constant(r, spec.mean), spec.variance);
      out.mean = g.mean();
      out.cov = g.covariance();
      out.model = std::make_unique<GaussianTarget>(std::move(g));
      break;
    }
    case TargetKind::kMixture: {
      auto g = GaussianMixtureTarget::symmetric_pair(spec.dim, spec.offset);
      out.mean = g.mean();
      out.cov = g.covariance();
      out.model = std::make_unique<GaussianMixtureTarget>(std::move(g));
      break;
    }
    case TargetKind::kDoubleWell:
      out.model = std::make_unique<DoubleWellTarget>(spec.height);
      break;
  }
  return out;
}

inline std::vector<MetricHook> make_hooks(const LoadedTarget& target,
                                          const std::vector<std::string>& names) {
  std::vector<MetricHook> hooks;
  const TargetModel* model = target.model.get();
  for (const auto& name : names) {
    if (name == "accuracy" || name == "log_likelihood") {
      const auto* lr = dynamic_cast<const LogisticRegressionTarget*>(model);
      const Dataset* test = &*target.test;
      const bool acc = name == "accuracy";
      hooks.push_back({name, [lr, test, acc](const SamplerState& s) {
                         const auto m = logistic_metrics(*lr, s.current, *test);
                         return acc ? m.accuracy : m.mean_log_likelihood;
                       }});
    } else if (name == "mean_error") {
      const Vector* mean = &target.mean;
      const Matrix* cov = &target.cov;
      hooks.push_back({name, [mean, cov](const SamplerState& s) {
                         return moment_errors(s.current, *mean, *cov).mean_error;
                       }});
    } else if (name == "cov_error") {
      const Vector* mean = &target.mean;
      const Matrix* cov = &target.cov;
      hooks.push_back({name, [mean, cov](const SamplerState& s) {
                         return moment_errors(s.current, *mean, *cov).cov_error;
                       }});
    } else if (name == "mean") {
      hooks.push_back({name, [](const SamplerState& s) { return s.current.mean(); }});
    } else if (name == "second_moment") {
      hooks.push_back({name, [](const SamplerState& s) {
                         return s.current.squaredNorm() / static_cast<double>(s.current.size());
                       }});
    } else if (name == "ksd") {
      hooks.push_back({name, [model](const SamplerState& s) {
                         if (s.current.rows() < 2) return std::nan("");
                         return ksd_u_statistic(s.current, *model,
                                                RbfKernel(median_heuristic(s.current)));
                       }});
    } else if (name == "w2_step") {
      hooks.push_back({name, [](const SamplerState& s) {
                         return w2_quadratic(s.previous, s.current);
                       }});
    } else {
      throw ContractViolation("unknown metric " + name);
    }
  }
  return hooks;
}

inline InitSpec make_init(const InitConfig& init, std::size_t dim) {
  const auto r = static_cast<Eigen::Index>(dim);
  if (init.kind == "gaussian") return InitSpec::gaussian(Vector::Constant(r, init.mean), init.stddev);
  if (init.kind == "point") return InitSpec::point_mass(Vector::Constant(r, init.mean));
  return InitSpec::from_model();
}

/// `iteration,metric,value` CSV of a trace.
inline std::string trace_csv(const RunTrace& trace) {
  std::string out = "iteration,metric,value\n";
  for (const auto& r : trace.records()) {
    out += std::to_string(r.iteration) + "," + r.metric + "," + format_real(r.value) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns a process exit status and reports on `log`.

/// run <config>: 0 ok, 1 config error, 2 divergence (partial traces kept).
inline int cmd_run(const fs::path& config_path, std::ostream& log = std::cerr) {
  ExperimentConfig ex;
  LoadedTarget target;
  try {
    ConfigFile cfg = ConfigFile::load(config_path);
    ex = resolve_config(cfg, config_path.parent_path());
    target = load_target(ex.target);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ContractViolation& e) {
    log << "config error: " << e.what() << "\n";
    return 1;
  }

  std::error_code ec;
  fs::create_directories(ex.output, ec);
  if (ec) {
    log << "config error: run.output: cannot create " << ex.output << ": " << ec.message() << "\n";
    return 1;
  }

  struct Job {
    SamplerKind sampler;
    std::uint64_t seed;
    std::optional<std::string> error;
    std::string failure;  // contract violations raised mid-run
  };
  std::vector<Job> jobs;
  for (auto s : ex.samplers) {
    for (auto seed : ex.seeds) jobs.push_back({s, seed, std::nullopt, {}});
  }
  const std::vector<MetricHook> hooks = make_hooks(target, ex.metrics);
  const InitSpec init = make_init(ex.init, target.model->dimension());

  parallel_for(jobs.size(), [&](std::size_t j) {
    Job& job = jobs[j];
    SamplerConfig sc = ex.sampler_configs.at(job.sampler);
    sc.seed = job.seed;
    RunOptions opts;
    opts.iterations = ex.iterations;
    opts.hook_every = ex.hook_every;
    opts.init = init;
    RunResult result;
    try {
      result = run(job.sampler, *target.model, sc, opts, hooks);
    } catch (const std::exception& e) {
      job.failure = e.what();
      return;
    }
    job.error = result.error;
    const fs::path file =
        ex.output / (std::string(to_string(job.sampler)) + "_" + std::to_string(job.seed) + ".csv");
    write_atomic(file, trace_csv(result.trace));
  }, 1);

  write_atomic(ex.output / "manifest.txt", manifest_text(ex));
  int status = 0;
  for (const auto& job : jobs) {
    if (!job.failure.empty()) {
      log << "config error: " << to_string(job.sampler) << " seed " << job.seed << ": "
          << job.failure << "\n";
      status = std::max(status, 1);
    }
  }
  for (const auto& job : jobs) {
    if (job.error) {
      log << "divergence: " << to_string(job.sampler) << " seed " << job.seed << ": "
          << *job.error << "\n";
      status = 2;
    }
  }
  return status;
}

/// Linear-interpolation quantile (R type 7) of a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  require(!sorted.empty(), "quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct TraceFile {
  std::string sampler;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::uint64_t, std::pair<std::string, double>>> rows;
};

/// Reads one `<sampler>_<seed>.csv` trace. The sampler name may contain
/// underscores; the seed follows the last one.
inline TraceFile read_trace(const fs::path& path) {
  TraceFile tf;
  const std::string stem = path.stem().string();
  const auto us = stem.rfind('_');
  if (us == std::string::npos || us == 0 || us + 1 == stem.size() ||
      stem.find_first_not_of("0123456789", us + 1) != std::string::npos) {
    throw ConfigError(path.string() + ": trace file name must be <sampler>_<seed>.csv");
  }
  tf.sampler = stem.substr(0, us);
  tf.seed = std::stoull(stem.substr(us + 1));
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line != "iteration,metric,value") {
    throw ConfigError(path.string() + ":1: expected header iteration,metric,value");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    }
    const std::string it = line.substr(0, c1);
    const std::string metric = line.substr(c1 + 1, c2 - c1 - 1);
    const std::string value = line.substr(c2 + 1);
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (it.empty() || it.find_first_not_of("0123456789") != std::string::npos ||
        value.empty() || *end != '\0' || metric.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
    tf.rows.push_back({std::stoull(it), {metric, v}});
  }
  return tf;
}

/// Reads `compare.threshold.*` lines from a run manifest, if there is one.
inline std::vector<Threshold> read_thresholds(const fs::path& dir) {
  std::vector<Threshold> out;
  const fs::path manifest = dir / "manifest.txt";
  if (!fs::exists(manifest)) return out;
  ConfigFile cfg = ConfigFile::load(manifest);
  for (const auto& [key, entry] : cfg.entries()) {
    for (const std::string stem : {"compare.threshold.", "compare.threshold_below."}) {
      if (key.rfind(stem, 0) == 0) {
        out.push_back({key.substr(stem.size()), cfg.real(key, 0.0),
                       stem == std::string("compare.threshold_below.")});
      }
    }
  }
  return out;
}

/// Summary of a trace directory.
struct CompareResult {
  std::string summary_csv;
  std::string thresholds_csv;
  std::map<std::string, std::string> plot_csv;  // metric -> contents
};

/// Per-seed iterations-to-threshold: first hooked iteration whose value meets
/// the threshold, or -1 when it never does.
inline long long iterations_to_threshold(
    const std::vector<std::pair<std::uint64_t, double>>& series, const Threshold& th) {
  for (const auto& [it, v] : series) {
    if (th.below ? v <= th.value : v >= th.value) return static_cast<long long>(it);
  }
  return -1;
}

/// Median of per-seed iteration counts; seeds that never reach the
/// threshold count as infinitely late. -1 when the median is not reached.
inline double median_iterations(std::vector<long long> per_seed) {
  std::vector<double> v;
  for (auto x : per_seed) {
    v.push_back(x < 0 ? std::numeric_limits<double>::infinity() : static_cast<double>(x));
  }
  std::sort(v.begin(), v.end());
  const double m = quantile_sorted(v, 0.5);
  return std::isfinite(m) ? m : -1.0;
}

inline CompareResult compare_traces(const std::vector<TraceFile>& traces,
                                    const std::vector<Threshold>& thresholds) {
  require(!traces.empty(), "compare: no trace files");
  // Every trace must carry the same (iteration, metric) sequence.
  const auto key_of = [](const TraceFile& t) {
    std::vector<std::pair<std::uint64_t, std::string>> k;
    for (const auto& r : t.rows) k.push_back({r.first, r.second.first});
    return k;
  };
  const auto reference = key_of(traces.front());
  for (const auto& t : traces) {
    if (key_of(t) != reference) {
      throw ConfigError("inconsistent hooks: trace " + t.sampler + "_" + std::to_string(t.seed) +
                        " differs from " + traces.front().sampler + "_" +
                        std::to_string(traces.front().seed));
    }
  }
  // sampler -> metric -> iteration -> values over seeds
  std::map<std::string, std::map<std::string, std::map<std::uint64_t, std::vector<double>>>> cube;
  // sampler -> metric -> seed -> series
  std::map<std::string,
           std::map<std::string, std::map<std::uint64_t, std::vector<std::pair<std::uint64_t, double>>>>>
      series;
  for (const auto& t : traces) {
    for (const auto& [it, mv] : t.rows) {
      cube[t.sampler][mv.first][it].push_back(mv.second);
      series[t.sampler][mv.first][t.seed].push_back({it, mv.second});
    }
  }
  // (sampler, metric) -> median iterations to threshold
  std::map<std::pair<std::string, std::string>, double> tti;
  CompareResult out;
  out.thresholds_csv = "sampler,seed,metric,threshold,iterations\n";
  for (const auto& [sampler, metrics] : series) {
    for (const auto& th : thresholds) {
      const auto mit = metrics.find(th.metric);
      if (mit == metrics.end()) continue;
      std::vector<long long> per_seed;
      for (const auto& [seed, s] : mit->second) {
        const long long n = iterations_to_threshold(s, th);
        per_seed.push_back(n);
        out.thresholds_csv += sampler + "," + std::to_string(seed) + "," + th.metric + "," +
                              format_real(th.value) + "," + std::to_string(n) + "\n";
      }
      tti[{sampler, th.metric}] = median_iterations(per_seed);
    }
  }
  out.summary_csv =
      "sampler,metric,iteration,median,q25,q75,iqr,seeds,threshold,iterations_to_threshold\n";
  for (const auto& [sampler, metrics] : cube) {
    for (const auto& [metric, by_it] : metrics) {
      std::string th_value, th_iters;
      for (const auto& th : thresholds) {
        if (th.metric == metric) {
          th_value = format_real(th.value);
          th_iters = format_real(tti[{sampler, metric}]);
        }
      }
      std::string& plot = out.plot_csv[metric];
      if (plot.empty()) plot = "sampler,iteration,median,q25,q75\n";
      for (const auto& [it, values] : by_it) {
        std::vector<double> v = values;
        std::sort(v.begin(), v.end());
        const double med = quantile_sorted(v, 0.5);
        const double q25 = quantile_sorted(v, 0.25);
        const double q75 = quantile_sorted(v, 0.75);
        out.summary_csv += sampler + "," + metric + "," + std::to_string(it) + "," +
                           format_real(med) + "," + format_real(q25) + "," + format_real(q75) +
                           "," + format_real(q75 - q25) + "," + std::to_string(v.size()) + "," +
                           th_value + "," + th_iters + "\n";
        plot += sampler + "," + std::to_string(it) + "," + format_real(med) + "," +
                format_real(q25) + "," + format_real(q75) + "\n";
      }
    }
  }
  return out;
}

/// compare <dir>: writes summary.csv, thresholds.csv and plot_<metric>.csv.
/// 1 on inconsistent hooks or unreadable traces.
inline int cmd_compare(const fs::path& dir, std::ostream& log = std::cerr) {
  try {
    if (!fs::is_directory(dir)) throw ConfigError(dir.string() + ": not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto& p = entry.path();
      if (p.extension() != ".csv") continue;
      const std::string name = p.filename().string();
      if (name == "summary.csv" || name == "thresholds.csv" || name.rfind("plot_", 0) == 0) {
        continue;
      }
      files.push_back(p);
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError(dir.string() + ": no trace files");
    std::vector<TraceFile> traces;
    for (const auto& f : files) traces.push_back(read_trace(f));
    std::vector<Threshold> thresholds = read_thresholds(dir);
    if (thresholds.empty()) thresholds.push_back({"accuracy", 0.73, false});
    const CompareResult res = compare_traces(traces, thresholds);
    write_atomic(dir / "summary.csv", res.summary_csv);
    write_atomic(dir / "thresholds.csv", res.thresholds_csv);
    for (const auto& [metric, text] : res.plot_csv) {
      write_atomic(dir / ("plot_" + metric + ".csv"), text);
    }
  } catch (const std::exception& e) {
    log << "compare error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticLogistic {
  Vector weights;
  Dataset train;
  Dataset test;
};

/// theta* ~ N(0, I), x ~ N(0, I), P(y = +1 | x) = sigma(theta*^T x); the first
/// floor(0.8 N) rows are the training split.
inline SyntheticLogistic synth_logistic(std::size_t n, std::size_t d, std::uint64_t seed) {
  require(n >= 5, "synth: need N >= 5 so both splits are non-empty");
  require(d >= 1, "synth: need d >= 1");
  const auto r = static_cast<Eigen::Index>(d);
  Vector theta(r);
  {
    rng::Stream s(seed, rng::Purpose::kData, 0, 0);
    for (Eigen::Index t = 0; t < r; ++t) theta[t] = s.normal();
  }
  FeatureMatrix x(static_cast<Eigen::Index>(n), r);
  Vector y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    rng::Stream s(seed, rng::Purpose::kData, 1, i);
    const auto row = static_cast<Eigen::Index>(i);
    for (Eigen::Index t = 0; t < r; ++t) x(row, t) = s.normal();
    const double p = sigmoid(x.row(row).dot(theta));
    y[row] = s.uniform() < p ? 1.0 : -1.0;
  }
  const auto n_train = static_cast<Eigen::Index>(n * 8 / 10);
  const auto n_test = static_cast<Eigen::Index>(n) - n_train;
  return {theta, Dataset(x.topRows(n_train), y.head(n_train)),
          Dataset(x.bottomRows(n_test), y.tail(n_test))};
}

inline std::string dataset_csv(const Dataset& data) {
  std::string out = "label";
  for (std::size_t j = 0; j < data.dimension(); ++j) out += ",x" + std::to_string(j + 1);
  out += "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += data.label(i) > 0 ? "1" : "-1";
    const auto row = data.row(i);
    for (Eigen::Index j = 0; j < row.size(); ++j) out += "," + format_real(row[j]);
    out += "\n";
  }
  return out;
}

/// synth <kind> --n --d --seed --out: writes <out>/train.csv and <out>/test.csv.
inline int cmd_synth(const std::string& kind, std::size_t n, std::size_t d, std::uint64_t seed,
                     const fs::path& out, std::ostream& log = std::cerr) {
  if (kind != "logistic") {
    log << "synth: unknown kind '" << kind << "' (expected logistic)\n";
    return 1;
  }
  try {
    const SyntheticLogistic data = synth_logistic(n, d, seed);
    if (n >= 20) {
      const auto& y = data.train.labels();
      if ((y.array() > 0).all() || (y.array() < 0).all()) {
        log << "synth: training labels are all one class; pick another seed\n";
        return 1;
      }
    }
    fs::create_directories(out);
    write_atomic(out / "train.csv", dataset_csv(data.train));
    write_atomic(out / "test.csv", dataset_csv(data.test));
  } catch (const std::exception& e) {
    log << "synth: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace posteriorflow
