// posteriorflow command-line harness: run, compare, validate, synth.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "posteriorflow/experiment.hpp"
#include "posteriorflow/validation.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Particle-based posterior sampling experiments"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "Run every (sampler, seed) pair of a config");
  run->add_option("config", config, "Experiment config file")->required();

  std::string trace_dir;
  auto* compare = app.add_subcommand("compare", "Summarize the traces in a run directory");
  compare->add_option("dir", trace_dir, "Directory holding <sampler>_<seed>.csv traces")
      ->required();

  std::string suite;
  auto* validate = app.add_subcommand("validate", "Run a named self-check suite");
  validate->add_option("suite", suite,
                       "gradcheck, fpe, jko, momentum-equivalence or lemma2")
      ->required();

  std::string kind, out_dir;
  long long n = 0, d = 0;
  std::uint64_t seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("kind", kind, "Dataset kind (logistic)")->required();
  synth->add_option("--n", n, "Number of rows before the 80/20 split")->required();
  synth->add_option("--d", d, "Number of features")->required();
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*run) return posteriorflow::cmd_run(config);
  if (*compare) return posteriorflow::cmd_compare(trace_dir);
  if (*validate) return posteriorflow::validation::cmd_validate(suite, std::cout, std::cerr);
  if (*synth) {
    if (n < 0 || d < 0) {
      std::cerr << "synth: sizes must be non-negative\n";
      return 1;
    }
    return posteriorflow::cmd_synth(kind, static_cast<std::size_t>(n),
                                    static_cast<std::size_t>(d), seed, out_dir);
  }
  return 1;
}
