// SPDX-License-Identifier: Apache-2.0
#include "peftlab/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#ifdef __linux__
#include <sched.h>
#endif

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Keeps the measuring thread on one core so per-core clock and cache state
// do not leak into the medians. Best effort; a failure just means noisier
// absolute numbers.
void pin_current_thread() {
#ifdef __linux__
  const int cpu = sched_getcpu();
  if (cpu < 0) return;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  sched_setaffinity(0, sizeof(set), &set);
#endif
}

double elapsed_us(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::micro>(t1 - t0).count();
}

// Routed adapter layers (anything with a router, k >= 1). Throws when none.
std::vector<Index> routed_layers(FrozenHost& host) {
  std::vector<Index> layers;
  for (Index l : host.adapter_layers()) {
    if (host.adapter_at(l)->config().kind != AdapterKind::kLora) layers.push_back(l);
  }
  if (layers.empty()) {
    throw ConfigError("analysis: host has no routed (multi-expert) adapter");
  }
  return layers;
}

Index uniform_expert_count(FrozenHost& host, const std::vector<Index>& layers) {
  const Index k = host.adapter_at(layers.front())->expert_count();
  for (Index l : layers) {
    if (host.adapter_at(l)->expert_count() != k) {
      throw ConfigError("analysis: routed adapters disagree on expert count");
    }
  }
  return k;
}

double overall_score(FrozenHost& host, const Dataset& data, LossKind loss_kind,
                     const ParticipationPolicy* policy) {
  std::vector<Index> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  OpCounter scratch;
  const Matrix x = data.gather_inputs(all);
  const Matrix outputs = host.eval_forward(x, scratch, nullptr, policy);
  if (data.mode == TaskMode::kClassification) {
    const std::vector<Index> labels = data.gather_labels(all);
    Index correct = 0;
    for (Index r = 0; r < outputs.rows(); ++r) {
      Index best = 0;
      for (Index c = 1; c < outputs.cols(); ++c) {
        if (outputs.at(r, c) > outputs.at(r, best)) best = c;
      }
      if (best == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(outputs.rows());
  }
  (void)loss_kind;
  return -mse_loss(outputs, data.gather_targets(all)).loss;
}

}  // namespace

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

std::vector<BenchEntry> bench_adapters(const std::vector<AdapterConfig>& configs,
                                       Index batch, Index trials, Index warmup,
                                       std::uint64_t seed) {
  if (configs.empty()) return {};
  pin_current_thread();
  std::vector<BenchEntry> entries(configs.size());
  std::vector<std::unique_ptr<Adapter>> adapters;
  std::vector<Matrix> probes;  // fixed upstream gradient per adapter
  Rng rng(seed);

  for (std::size_t i = 0; i < configs.size(); ++i) {
    entries[i].config = configs[i];
    entries[i].predicted = matmul_count(configs[i]);
    entries[i].params = param_count(configs[i]);
    adapters.push_back(init_adapter(configs[i]));
    probes.push_back(Matrix(batch, configs[i].d_out));
  }
  const Matrix x = random_normal(batch, configs.front().d_in, 1.0, rng);
  for (Matrix& p : probes) {
    for (double& v : p.data()) v = rng.normal();
  }

  // Count check on an instrumented forward before any timing.
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    OpCounter counter;
    adapters[i]->forward(x, counter);
    entries[i].measured = adapters[i]->last_matmul_count();
    entries[i].forward_flops = counter.flops;
    entries[i].counts_match =
        entries[i].measured.branch_matmuls == entries[i].predicted.branch_matmuls &&
        entries[i].measured.router_matmuls == entries[i].predicted.router_matmuls &&
        static_cast<std::uint64_t>(counter.matmul_calls) ==
            static_cast<std::uint64_t>(entries[i].predicted.branch_matmuls +
                                       entries[i].predicted.router_matmuls);
  }

  std::vector<std::vector<double>> forward_us(configs.size());
  std::vector<std::vector<double>> step_us(configs.size());
  OpCounter counter;
  // Interleaved rounds: every adapter is measured once per round so slow
  // drift of the machine hits all architectures alike.
  for (Index round = 0; round < warmup + trials; ++round) {
    const bool measured = round >= warmup;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const auto t0 = Clock::now();
      adapters[i]->forward(x, counter);
      const auto t1 = Clock::now();
      if (measured) forward_us[i].push_back(elapsed_us(t0, t1));
    }
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      std::vector<ParamRef> refs = adapters[i]->params();
      const auto t0 = Clock::now();
      adapters[i]->forward(x, counter);
      BackwardResult back = adapters[i]->backward(probes[i]);
      for (const NamedGrad& g : back.param_grads) {
        for (ParamRef& ref : refs) {
          if (ref.name == g.name) {
            apply_sgd(*ref.value, g.grad, 0.0);  // full update path, params intact
            break;
          }
        }
      }
      const auto t1 = Clock::now();
      if (measured) step_us[i].push_back(elapsed_us(t0, t1));
    }
  }
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    entries[i].median_forward_us = median(forward_us[i]);
    entries[i].median_train_step_us = median(step_us[i]);
  }
  return entries;
}

CostReport latency_bench(const BenchOptions& options) {
  if (options.trials < 1) throw ConfigError("latency_bench: trials must be >= 1");
  CostReport report;
  report.options = options;
  report.all_counts_match = true;

  std::vector<AdapterConfig> configs;
  for (Index k : options.expert_counts) {
    AdapterConfig lora{AdapterKind::kLora,     options.d, options.d, options.rank * k, 1,
                       options.alpha,          RouterKind::kLinearSoftmax, 0,
                       mix_seed(options.seed, static_cast<std::uint64_t>(k))};
    AdapterConfig moe{AdapterKind::kMoELora,   options.d, options.d, options.rank, k,
                      options.alpha,           RouterKind::kLinearSoftmax, 0,
                      mix_seed(options.seed, static_cast<std::uint64_t>(k) + 101)};
    AdapterConfig team{AdapterKind::kTeamLora, options.d, options.d, options.rank, k,
                       options.alpha,          RouterKind::kShapleyInteraction, 0,
                       mix_seed(options.seed, static_cast<std::uint64_t>(k) + 202)};
    configs.push_back(lora);
    configs.push_back(moe);
    configs.push_back(team);
  }
  const std::vector<BenchEntry> entries =
      bench_adapters(configs, options.batch, options.trials, options.warmup, options.seed);

  for (std::size_t g = 0; g < options.expert_counts.size(); ++g) {
    BenchGroup group;
    group.experts = options.expert_counts[g];
    group.lora = entries[3 * g];
    group.moelora = entries[3 * g + 1];
    group.teamlora = entries[3 * g + 2];
    group.team_vs_moe_forward_ratio =
        group.teamlora.median_forward_us / group.moelora.median_forward_us;
    group.team_vs_moe_train_ratio =
        group.teamlora.median_train_step_us / group.moelora.median_train_step_us;
    group.team_vs_lora_forward_ratio =
        group.teamlora.median_forward_us / group.lora.median_forward_us;
    group.moe_vs_lora_forward_ratio =
        group.moelora.median_forward_us / group.lora.median_forward_us;
    report.all_counts_match = report.all_counts_match && group.lora.counts_match &&
                              group.moelora.counts_match && group.teamlora.counts_match;
    report.groups.push_back(std::move(group));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Expert load
// ---------------------------------------------------------------------------

LoadReport expert_utilization(FrozenHost& host, const Dataset& eval_data) {
  const std::vector<Index> layers = routed_layers(host);
  const Index k = uniform_expert_count(host, layers);

  LoadReport report;
  report.n_tasks = eval_data.n_tasks;
  report.experts = k;
  report.mean_omega.assign(static_cast<std::size_t>(eval_data.n_tasks),
                           std::vector<double>(static_cast<std::size_t>(k), 0.0));
  report.argmax_freq = report.mean_omega;
  report.entropy.assign(static_cast<std::size_t>(eval_data.n_tasks), 0.0);
  report.mean_omega_row_sum.assign(static_cast<std::size_t>(eval_data.n_tasks), 0.0);

  std::uint64_t negative = 0;
  std::uint64_t total_entries = 0;
  OpCounter scratch;

  for (Index t = 0; t < eval_data.n_tasks; ++t) {
    const std::vector<Index> idx = eval_data.indices_of_task(t);
    if (idx.empty()) continue;
    const Matrix x = eval_data.gather_inputs(idx);
    ForwardTrace trace;
    host.eval_forward(x, scratch, &trace);
    auto& mean_row = report.mean_omega[static_cast<std::size_t>(t)];
    auto& argmax_row = report.argmax_freq[static_cast<std::size_t>(t)];
    std::uint64_t rows_seen = 0;
    for (Index l : layers) {
      const Matrix& omega = trace.layers[static_cast<std::size_t>(l)].router.omega;
      for (Index n = 0; n < omega.rows(); ++n) {
        Index best = 0;
        for (Index e = 0; e < k; ++e) {
          const double w = omega.at(n, e);
          mean_row[static_cast<std::size_t>(e)] += w;
          if (w < 0.0) ++negative;
          if (w > omega.at(n, best)) best = e;
          ++total_entries;
        }
        argmax_row[static_cast<std::size_t>(best)] += 1.0;
        ++rows_seen;
      }
    }
    for (Index e = 0; e < k; ++e) {
      mean_row[static_cast<std::size_t>(e)] /= static_cast<double>(rows_seen);
      argmax_row[static_cast<std::size_t>(e)] /= static_cast<double>(rows_seen);
      report.mean_omega_row_sum[static_cast<std::size_t>(t)] +=
          mean_row[static_cast<std::size_t>(e)];
    }
    // Entropy of the clamped, normalized mean participation mass.
    double mass = 0.0;
    for (double w : mean_row) mass += std::max(w, 0.0);
    double entropy = 0.0;
    if (mass > 0.0) {
      for (double w : mean_row) {
        const double p = std::max(w, 0.0) / mass;
        if (p > 0.0) entropy -= p * std::log(p);
      }
    }
    report.entropy[static_cast<std::size_t>(t)] = entropy;
  }
  report.negative_omega_frequency =
      total_entries == 0 ? 0.0
                         : static_cast<double>(negative) / static_cast<double>(total_entries);
  return report;
}

// ---------------------------------------------------------------------------
// Expert redundancy
// ---------------------------------------------------------------------------

RetentionReport top1_retention(FrozenHost& host, const Dataset& eval_data,
                               LossKind loss_kind, bool renormalize) {
  const std::vector<Index> layers = routed_layers(host);
  const Index k = uniform_expert_count(host, layers);

  RetentionReport report;
  report.experts = k;
  report.renormalized = renormalize;
  report.all_score = overall_score(host, eval_data, loss_kind, nullptr);

  ParticipationPolicy top1;
  top1.mode = ParticipationPolicy::Mode::kTopOne;
  top1.renormalize = renormalize;
  report.top1_score = overall_score(host, eval_data, loss_kind, &top1);

  for (Index e = 0; e < k; ++e) {
    ParticipationPolicy solo;
    solo.mode = ParticipationPolicy::Mode::kSoloExpert;
    solo.expert = e;
    solo.renormalize = renormalize;
    report.solo_scores.push_back(overall_score(host, eval_data, loss_kind, &solo));
  }
  report.retention_ratio =
      report.all_score != 0.0 ? report.top1_score / report.all_score
                              : std::numeric_limits<double>::quiet_NaN();
  return report;
}

// ---------------------------------------------------------------------------
// Shapley oracle
// ---------------------------------------------------------------------------

double participation_payoff(FrozenHost& host, const Dataset& eval_data,
                            const std::vector<double>& participation, LossKind loss_kind) {
  const std::vector<Index> layers = routed_layers(host);
  const Index k = uniform_expert_count(host, layers);
  if (static_cast<Index>(participation.size()) != k) {
    throw ShapeError("participation_payoff: row has " +
                     std::to_string(participation.size()) + " entries for k=" +
                     std::to_string(k));
  }
  ParticipationPolicy policy;
  policy.mode = ParticipationPolicy::Mode::kFixedRow;
  policy.row = participation;

  std::vector<Index> all(eval_data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  OpCounter scratch;
  const Matrix x = eval_data.gather_inputs(all);
  const Matrix outputs = host.eval_forward(x, scratch, nullptr, &policy);
  if (eval_data.mode == TaskMode::kClassification &&
      loss_kind == LossKind::kCrossEntropy) {
    return -cross_entropy_loss(outputs, eval_data.gather_labels(all)).loss;
  }
  return -mse_loss(outputs, eval_data.gather_targets(all)).loss;
}

ShapleyEstimate shapley_mc(FrozenHost& host, const Dataset& eval_data, Index expert_index,
                           Index n_samples, std::uint64_t seed, LossKind loss_kind) {
  const std::vector<Index> layers = routed_layers(host);
  const Index k = uniform_expert_count(host, layers);
  if (k < 2) throw ConfigError("shapley_mc: needs k >= 2 experts, got k=1");
  if (expert_index < 0 || expert_index >= k) {
    throw ConfigError("shapley_mc: expert index " + std::to_string(expert_index) +
                      " out of range for k=" + std::to_string(k));
  }
  if (n_samples < 100) throw ConfigError("shapley_mc: needs at least 100 samples");

  Rng rng(seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  std::vector<double> row(static_cast<std::size_t>(k), 0.0);
  std::vector<double> rest(static_cast<std::size_t>(k - 1), 0.0);
  for (Index s = 0; s < n_samples; ++s) {
    const double w = rng.uniform();
    // Symmetric Dirichlet(1) over the remaining experts, scaled to 1 - w.
    double total = 0.0;
    for (double& r : rest) {
      r = -std::log(1.0 - rng.uniform());
      total += r;
    }
    std::size_t slot = 0;
    for (Index e = 0; e < k; ++e) {
      if (e == expert_index) continue;
      row[static_cast<std::size_t>(e)] = (1.0 - w) * rest[slot] / total;
      ++slot;
    }
    row[static_cast<std::size_t>(expert_index)] = w;
    const double with = participation_payoff(host, eval_data, row, loss_kind);
    row[static_cast<std::size_t>(expert_index)] = 0.0;
    const double without = participation_payoff(host, eval_data, row, loss_kind);
    const double value = with - without;
    sum += value;
    sum_sq += value * value;
  }
  ShapleyEstimate estimate;
  estimate.n_samples = n_samples;
  estimate.phi_hat = sum / static_cast<double>(n_samples);
  const double variance =
      std::max(0.0, sum_sq / static_cast<double>(n_samples) -
                        estimate.phi_hat * estimate.phi_hat);
  estimate.std_error = std::sqrt(variance / static_cast<double>(n_samples));
  return estimate;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

AblationGrid ablation_grid(const AblationOptions& options) {
  if (options.n_seeds < 1) throw ConfigError("ablation_grid: n_seeds must be >= 1");
  AblationGrid grid;
  grid.options = options;
  const std::pair<AdapterKind, RouterKind> variants[4] = {
      {AdapterKind::kMoELora, RouterKind::kLinearSoftmax},
      {AdapterKind::kMoELora, RouterKind::kShapleyInteraction},
      {AdapterKind::kTeamLora, RouterKind::kLinearSoftmax},
      {AdapterKind::kTeamLora, RouterKind::kShapleyInteraction},
  };
  grid.cells.resize(4);
  for (int v = 0; v < 4; ++v) {
    grid.cells[v].kind = variants[v].first;
    grid.cells[v].router = variants[v].second;
  }

  for (Index s = 0; s < options.n_seeds; ++s) {
    const std::uint64_t seed = mix_seed(options.seed, static_cast<std::uint64_t>(s));
    const Dataset train_data =
        gen_multitask(options.n_tasks, options.n_per_task,
                      {options.host_dims.front(), options.host_dims.back()},
                      seed, TaskMode::kClassification, "train");
    const Dataset eval_data =
        gen_multitask(options.n_tasks, options.eval_per_task,
                      {options.host_dims.front(), options.host_dims.back()},
                      seed, TaskMode::kClassification, "eval");
    for (int v = 0; v < 4; ++v) {
      FrozenHost host(options.host_dims, seed);
      AdapterConfig cfg;
      cfg.kind = variants[v].first;
      cfg.router_kind = variants[v].second;
      cfg.rank = options.rank;
      cfg.experts = options.experts;
      cfg.alpha = options.alpha;
      cfg.s_hidden = options.s_hidden;
      cfg.seed = mix_seed(seed, static_cast<std::uint64_t>(100 + v));
      for (Index layer : options.adapter_layers) host.attach_adapter(layer, cfg);

      TrainConfig tc = options.train;
      tc.seed = mix_seed(seed, 0x747261);
      Trainer trainer(host, train_data, eval_data, tc);
      trainer.run(tc.steps);

      const std::vector<TaskEval> evals = evaluate_per_task(host, eval_data, tc.loss);
      double acc = 0.0;
      double loss = 0.0;
      for (const TaskEval& te : evals) {
        acc += te.accuracy;
        loss += te.loss;
      }
      acc /= static_cast<double>(evals.size());
      loss /= static_cast<double>(evals.size());
      grid.cells[v].accuracy_per_seed.push_back(acc);
      grid.cells[v].loss_per_seed.push_back(loss);
      if (s == 0) {
        grid.cells[v].params = param_count(host.adapter_at(options.adapter_layers.front())
                                               ->config());
      }
    }
    if (grid.cells[3].accuracy_per_seed.back() >= grid.cells[0].accuracy_per_seed.back()) {
      ++grid.team_wins_vs_moe;
    }
  }
  for (AblationCell& cell : grid.cells) {
    double acc = 0.0;
    double loss = 0.0;
    for (double a : cell.accuracy_per_seed) acc += a;
    for (double l : cell.loss_per_seed) loss += l;
    cell.mean_accuracy = acc / static_cast<double>(cell.accuracy_per_seed.size());
    cell.mean_loss = loss / static_cast<double>(cell.loss_per_seed.size());
  }
  return grid;
}

}  // namespace peftlab
