// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "peftlab/host.hpp"
#include "peftlab/tasks.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Cost accounting and latency
// ---------------------------------------------------------------------------

struct BenchOptions {
  Index d = 512;       // adapter d_in == d_out
  Index batch = 64;
  Index trials = 100;  // measured samples per architecture
  Index warmup = 10;
  Index rank = 2;      // per-expert rank r / r_B
  double alpha = 8.0;
  std::vector<Index> expert_counts = {2, 4, 8};
  std::uint64_t seed = 1;
};

struct BenchEntry {
  AdapterConfig config;
  MatmulCount predicted;
  MatmulCount measured;
  bool counts_match = false;
  std::uint64_t forward_flops = 0;
  ParamCount params;
  double median_forward_us = 0.0;
  double median_train_step_us = 0.0;
};

// Measures the listed adapters with interleaved trials (one round touches
// every adapter once, so machine drift cancels out of the ratios). The train
// step is forward + backward + a zero-lr sgd update over all parameters.
std::vector<BenchEntry> bench_adapters(const std::vector<AdapterConfig>& configs,
                                       Index batch, Index trials, Index warmup,
                                       std::uint64_t seed);

struct BenchGroup {
  Index experts = 0;
  BenchEntry lora;      // rank k*r, matched parameter budget
  BenchEntry moelora;   // rank r, k experts
  BenchEntry teamlora;  // rank r, k experts
  double team_vs_moe_forward_ratio = 0.0;
  double team_vs_moe_train_ratio = 0.0;
  double team_vs_lora_forward_ratio = 0.0;
  double moe_vs_lora_forward_ratio = 0.0;
};

struct CostReport {
  BenchOptions options;
  std::vector<BenchGroup> groups;  // one per expert count
  bool all_counts_match = false;
};

// LoRA / MoELoRA / TeamLoRA at every requested expert count.
CostReport latency_bench(const BenchOptions& options);

// ---------------------------------------------------------------------------
// Expert load
// ---------------------------------------------------------------------------

struct LoadReport {
  Index n_tasks = 0;
  Index experts = 0;
  std::vector<std::vector<double>> mean_omega;   // tasks x experts
  std::vector<std::vector<double>> argmax_freq;  // tasks x experts
  std::vector<double> entropy;                   // per task, in [0, ln k]
  std::vector<double> mean_omega_row_sum;        // per task
  double negative_omega_frequency = 0.0;
};

// Mean per-token participations grouped by task, aggregated over every
// routed adapter layer. Entropy uses the mean-omega mass (negative entries
// clamped to zero before normalizing); argmax frequencies are emitted
// alongside as the count-based view of the same load.
LoadReport expert_utilization(FrozenHost& host, const Dataset& eval_data);

// ---------------------------------------------------------------------------
// Expert redundancy
// ---------------------------------------------------------------------------

struct RetentionReport {
  Index experts = 0;
  std::vector<double> solo_scores;  // expert i active alone, own omega kept
  double top1_score = 0.0;          // per-token argmax expert only
  double all_score = 0.0;           // normal inference
  double retention_ratio = 0.0;     // top1 / all
  bool renormalized = false;
};

// Score is accuracy in classification mode and negative loss in regression
// mode. Solo and top-1 keep the surviving expert's unnormalized omega unless
// renormalize is set.
RetentionReport top1_retention(FrozenHost& host, const Dataset& eval_data,
                               LossKind loss_kind, bool renormalize = false);

// ---------------------------------------------------------------------------
// Shapley oracle
// ---------------------------------------------------------------------------

struct ShapleyEstimate {
  double phi_hat = 0.0;
  double std_error = 0.0;
  Index n_samples = 0;
};

// Monte-Carlo estimate of the expert's marginal contribution under fuzzy
// participation. Per sample: own participation w ~ U[0,1), the remaining
// experts' participations are symmetric-Dirichlet(1) scaled to mass 1 - w,
// and the sample value is v(w, s) - v(0, s) with payoff v = negative eval
// loss under a fixed participation row. Seed-deterministic.
ShapleyEstimate shapley_mc(FrozenHost& host, const Dataset& eval_data, Index expert_index,
                           Index n_samples, std::uint64_t seed,
                           LossKind loss_kind = LossKind::kCrossEntropy);

// Payoff used by shapley_mc: negative mean eval loss with every routed
// adapter forced to the given participation row. Exposed so independent
// oracles can integrate the same function.
double participation_payoff(FrozenHost& host, const Dataset& eval_data,
                            const std::vector<double>& participation, LossKind loss_kind);

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationOptions {
  std::vector<Index> host_dims = {16, 32, 8};
  std::vector<Index> adapter_layers = {0, 1};
  Index rank = 2;
  Index experts = 4;
  double alpha = 4.0;
  Index s_hidden = 0;
  Index n_tasks = 4;
  Index n_per_task = 256;
  Index eval_per_task = 64;
  TrainConfig train;
  Index n_seeds = 10;
  std::uint64_t seed = 1;
};

struct AblationCell {
  AdapterKind kind = AdapterKind::kMoELora;     // expert structure
  RouterKind router = RouterKind::kLinearSoftmax;
  ParamCount params;
  std::vector<double> accuracy_per_seed;
  std::vector<double> loss_per_seed;
  double mean_accuracy = 0.0;
  double mean_loss = 0.0;
};

struct AblationGrid {
  AblationOptions options;
  std::vector<AblationCell> cells;  // (moe,lin), (moe,shap), (team,lin), (team,shap)
  Index team_wins_vs_moe = 0;       // seeds where (team,shap) >= (moe,lin) accuracy
};

// Trains the 2x2 {expert structure} x {router} grid on the synthetic
// multi-task suite across n_seeds seeds. The (symmetric, linear) cell is
// plain MoELoRA and (shared, shapley) is TeamLoRA; parameter budgets of the
// expert tensors match across cells by construction.
AblationGrid ablation_grid(const AblationOptions& options);

}  // namespace peftlab
