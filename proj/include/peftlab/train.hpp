// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/host.hpp"
#include "peftlab/tasks.hpp"

namespace peftlab {

enum class OptimizerKind { kSgd, kAdam };
enum class LossKind { kCrossEntropy, kMse };

std::string to_string(OptimizerKind kind);
std::string to_string(LossKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);
LossKind loss_kind_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-2;
  Index steps = 0;
  Index batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossKind loss = LossKind::kCrossEntropy;
  std::uint64_t seed = 0;
  Index eval_every = 50;

  void validate() const;
};

struct TaskEval {
  double loss = 0.0;
  double accuracy = 0.0;  // classification only; 0 in regression mode
};

struct MetricsRow {
  Index step = 0;
  double train_loss = 0.0;
  std::vector<TaskEval> per_task;
  double wall_time_ms = 0.0;  // cumulative since run start
};

struct LossGrad {
  double loss = 0.0;
  Matrix output_grad;
};

// Mean cross-entropy over the batch via the log-sum-exp form; the gradient
// is (softmax - onehot) / N. Labels outside [0, C) raise ConfigError.
LossGrad cross_entropy_loss(const Matrix& logits, const std::vector<Index>& labels);

// Mean over all entries of the squared difference; gradient 2 (out - y) / NC.
LossGrad mse_loss(const Matrix& outputs, const Matrix& targets);

// Forward + loss + adapter gradients for one batch through the host.
struct BatchGrad {
  double loss = 0.0;
  std::vector<NamedGrad> grads;
};
BatchGrad loss_and_grad(FrozenHost& host, const Matrix& inputs,
                        const std::vector<Index>& labels, const Matrix& targets,
                        LossKind loss_kind, OpCounter& counter);

// One optimizer step applied in place. Adam keeps bias-corrected first and
// second moments per tensor; step_index is 1-based.
struct AdamSlot {
  Matrix m, v;
};
void apply_sgd(Matrix& param, const Matrix& grad, double lr);
void apply_adam(Matrix& param, const Matrix& grad, AdamSlot& slot, Index step_index,
                const TrainConfig& cfg);

// Per-task loss/accuracy on a dataset (batched over each task's samples).
std::vector<TaskEval> evaluate_per_task(FrozenHost& host, const Dataset& data,
                                        LossKind loss_kind);

// Adapter-only training with deterministic batching: the permutation of
// epoch e is drawn from a stream derived from (seed, e), so the schedule is
// a pure function of (seed, step) and resuming from a checkpoint replays the
// exact trajectory.
class Trainer {
 public:
  Trainer(FrozenHost& host, const Dataset& train_data, const Dataset& eval_data,
          const TrainConfig& cfg);

  // Runs `steps` optimizer steps, appending metrics every eval_every steps
  // (and at the final step). Returns rows appended by this call.
  std::vector<MetricsRow> run(Index steps);

  const std::vector<MetricsRow>& history() const { return history_; }
  Index step() const { return step_; }
  FrozenHost& host() { return *host_; }

  // Bit-exact state round trip: adapter tensors, optimizer moments, step
  // counter and the batching stream descriptor.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<Index> batch_indices(Index step) const;

  FrozenHost* host_;
  const Dataset* train_data_;
  const Dataset* eval_data_;
  TrainConfig cfg_;
  Index step_ = 0;
  double total_wall_ms_ = 0.0;
  std::vector<ParamRef> trainable_;
  std::vector<AdamSlot> adam_;
  std::vector<MetricsRow> history_;
};

// Convenience wrapper: construct a Trainer and run cfg.steps steps.
std::vector<MetricsRow> train(FrozenHost& host, const Dataset& train_data,
                              const Dataset& eval_data, const TrainConfig& cfg);

// Metrics CSV: header "step,train_loss,task<T>_loss[,task<T>_acc]...,wall_time_ms".
void write_metrics_csv(const std::vector<MetricsRow>& history, TaskMode mode,
                       const std::filesystem::path& path);

}  // namespace peftlab
