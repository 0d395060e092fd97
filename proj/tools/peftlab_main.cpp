// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver: config-file-driven train/eval/bench/ablate/analyze/
// gradcheck subcommands, each writing machine-readable artifacts.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "peftlab/error.hpp"
#include "peftlab/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "Experiment config file (JSON)");
  sub->add_option("--out", args.out_dir, "Output directory (overrides config)");
  sub->add_option("--seed", args.seed, "Seed override")->each([&args](const std::string&) {
    args.seed_set = true;
  });
  sub->add_flag("--quiet", args.quiet, "Suppress progress output");
}

peftlab::ExperimentConfig resolve_config(const CommonArgs& args) {
  peftlab::ExperimentConfig cfg = args.config_path.empty()
                                      ? peftlab::default_experiment_config()
                                      : peftlab::load_experiment_config(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed_set) cfg.seed = args.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale PEFT laboratory: LoRA, MoELoRA and TeamLoRA adapters"};
  app.require_subcommand(1);

  CommonArgs args;
  int (*run)(const peftlab::ExperimentConfig&, bool) = nullptr;

  auto* train = app.add_subcommand("train", "Train adapters on the synthetic task suite");
  add_common(train, args);
  train->callback([&run] { run = peftlab::cmd_train; });

  auto* eval = app.add_subcommand("eval", "Evaluate a trained model per task");
  add_common(eval, args);
  eval->callback([&run] { run = peftlab::cmd_eval; });

  auto* bench = app.add_subcommand("bench", "Measure matmul counts and latency");
  add_common(bench, args);
  bench->callback([&run] { run = peftlab::cmd_bench; });

  auto* ablate = app.add_subcommand("ablate", "Train the 2x2 structure/router grid");
  add_common(ablate, args);
  ablate->callback([&run] { run = peftlab::cmd_ablate; });

  auto* analyze = app.add_subcommand("analyze", "Expert load, redundancy and attribution");
  add_common(analyze, args);
  analyze->callback([&run] { run = peftlab::cmd_analyze; });

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  add_common(gradcheck, args);
  gradcheck->callback([&run] { run = peftlab::cmd_gradcheck; });

  CLI11_PARSE(app, argc, argv);

  try {
    peftlab::ExperimentConfig cfg = resolve_config(args);
    return run(cfg, args.quiet);
  } catch (const peftlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
