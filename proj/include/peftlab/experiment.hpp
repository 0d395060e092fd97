// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "peftlab/analysis.hpp"
#include "peftlab/diffkit.hpp"

namespace peftlab {

inline TrainConfig default_experiment_train_config() {
  TrainConfig t;
  t.steps = 400;
  return t;
}

// One experiment = one config file. Every field has a default; unknown keys
// are rejected so typos fail loudly. The resolved config is echoed to the
// output directory, making every artifact self-describing.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  std::vector<Index> host_dims = {16, 32, 8};
  Activation activation = Activation::kRelu;
  std::vector<Index> adapter_layers = {0, 1};

  AdapterKind adapter_kind = AdapterKind::kTeamLora;
  Index rank = 2;
  Index experts = 4;
  double alpha = 4.0;
  std::optional<RouterKind> router_kind;  // default depends on kind
  Index s_hidden = 0;

  Index n_tasks = 4;
  Index n_per_task = 256;
  Index eval_per_task = 64;
  TaskMode mode = TaskMode::kClassification;
  double noise_std = 0.0;

  TrainConfig train = default_experiment_train_config();  // seed comes from the top level

  BenchOptions bench;

  Index ablate_seeds = 10;

  bool renormalize_solo = false;
  Index shapley_samples = 2000;
  Index shapley_expert = 0;
  std::string checkpoint;  // optional starting checkpoint for analyze/eval

  double gradcheck_tol = 1e-5;
  double gradcheck_eps = 1e-5;

  RouterKind resolved_router_kind() const;
  AdapterConfig adapter_config_for(Index d_in, Index d_out, std::uint64_t adapter_seed) const;
};

ExperimentConfig default_experiment_config();
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json resolved_config_json(const ExperimentConfig& cfg);

// Builds the configured pipeline: datasets, frozen host, attached adapters.
struct Experiment {
  ExperimentConfig cfg;
  Dataset train_data;
  Dataset eval_data;
  std::unique_ptr<FrozenHost> host;
};
Experiment build_experiment(const ExperimentConfig& cfg);

// The fixed gradient-check suite: twenty seeded adapter and host layer
// configurations spanning all adapter kinds, both router kinds, k in
// {1,2,4,8} and ranks in {1,4,8}.
struct GradCheckCase {
  std::string label;
  GradCheckReport report;
};
std::vector<GradCheckCase> run_gradcheck_suite(double tol, double epsilon);

// Subcommand entry points. Each writes its artifacts under cfg.out_dir and
// returns a process exit code (0 iff everything it checked passed).
int cmd_train(const ExperimentConfig& cfg, bool quiet);
int cmd_eval(const ExperimentConfig& cfg, bool quiet);
int cmd_bench(const ExperimentConfig& cfg, bool quiet);
int cmd_ablate(const ExperimentConfig& cfg, bool quiet);
int cmd_analyze(const ExperimentConfig& cfg, bool quiet);
int cmd_gradcheck(const ExperimentConfig& cfg, bool quiet);

}  // namespace peftlab
