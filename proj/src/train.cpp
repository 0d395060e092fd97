// SPDX-License-Identifier: Apache-2.0
#include "peftlab/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "peftlab/error.hpp"
#include "peftlab/json_util.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

using nlohmann::json;

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kSgd ? "sgd" : "adam";
}

std::string to_string(LossKind kind) {
  return kind == LossKind::kCrossEntropy ? "cross_entropy" : "mse";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "cross_entropy") return LossKind::kCrossEntropy;
  if (s == "mse") return LossKind::kMse;
  throw ConfigError("unknown loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("train: lr must be >= 0");
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
}

LossGrad cross_entropy_loss(const Matrix& logits, const std::vector<Index>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows()) + " rows");
  }
  const Index n = logits.rows();
  const Index c = logits.cols();
  LossGrad result;
  result.output_grad = Matrix(n, c);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(c) + ") at row " + std::to_string(i));
    }
    const double* row = logits.row_ptr(i);
    double mx = row[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (Index j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double logsumexp = mx + std::log(sum);
    total += logsumexp - row[y];
    double* g = result.output_grad.row_ptr(i);
    for (Index j = 0; j < c; ++j) {
      g[j] = std::exp(row[j] - mx) / sum / static_cast<double>(n);
    }
    g[y] -= 1.0 / static_cast<double>(n);
  }
  result.loss = total / static_cast<double>(n);
  return result;
}

LossGrad mse_loss(const Matrix& outputs, const Matrix& targets) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols()) {
    throw ShapeError("mse: output " + std::to_string(outputs.rows()) + "x" +
                     std::to_string(outputs.cols()) + " vs target " +
                     std::to_string(targets.rows()) + "x" + std::to_string(targets.cols()));
  }
  LossGrad result;
  result.output_grad = Matrix(outputs.rows(), outputs.cols());
  const double inv = 1.0 / static_cast<double>(outputs.size());
  double total = 0.0;
  for (Index i = 0; i < outputs.size(); ++i) {
    const double d = outputs.data()[i] - targets.data()[i];
    total += d * d;
    result.output_grad.data()[i] = 2.0 * d * inv;
  }
  result.loss = total * inv;
  return result;
}

BatchGrad loss_and_grad(FrozenHost& host, const Matrix& inputs,
                        const std::vector<Index>& labels, const Matrix& targets,
                        LossKind loss_kind, OpCounter& counter) {
  if (inputs.rows() == 0) throw ConfigError("loss_and_grad: empty batch");
  const Matrix outputs = host.forward(inputs, counter);
  LossGrad lg = loss_kind == LossKind::kCrossEntropy ? cross_entropy_loss(outputs, labels)
                                                     : mse_loss(outputs, targets);
  BackwardResult back = host.backward(lg.output_grad);
  return BatchGrad{lg.loss, std::move(back.param_grads)};
}

void apply_sgd(Matrix& param, const Matrix& grad, double lr) {
  for (Index i = 0; i < param.size(); ++i) {
    param.data()[i] -= lr * grad.data()[i];
  }
}

void apply_adam(Matrix& param, const Matrix& grad, AdamSlot& slot, Index step_index,
                const TrainConfig& cfg) {
  if (slot.m.size() != param.size()) {
    slot.m = Matrix(param.rows(), param.cols());
    slot.v = Matrix(param.rows(), param.cols());
  }
  const double b1 = cfg.beta1;
  const double b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_index));
  for (Index i = 0; i < param.size(); ++i) {
    const double g = grad.data()[i];
    double& m = slot.m.data()[i];
    double& v = slot.v.data()[i];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    param.data()[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
}

std::vector<TaskEval> evaluate_per_task(FrozenHost& host, const Dataset& data,
                                        LossKind loss_kind) {
  std::vector<TaskEval> out;
  out.reserve(static_cast<std::size_t>(data.n_tasks));
  OpCounter scratch;
  for (Index t = 0; t < data.n_tasks; ++t) {
    const std::vector<Index> idx = data.indices_of_task(t);
    TaskEval te;
    if (!idx.empty()) {
      const Matrix x = data.gather_inputs(idx);
      const Matrix outputs = host.eval_forward(x, scratch);
      if (data.mode == TaskMode::kClassification) {
        const std::vector<Index> labels = data.gather_labels(idx);
        te.loss = loss_kind == LossKind::kCrossEntropy
                      ? cross_entropy_loss(outputs, labels).loss
                      : 0.0;
        Index correct = 0;
        for (Index r = 0; r < outputs.rows(); ++r) {
          Index best = 0;
          for (Index ccol = 1; ccol < outputs.cols(); ++ccol) {
            if (outputs.at(r, ccol) > outputs.at(r, best)) best = ccol;
          }
          if (best == labels[static_cast<std::size_t>(r)]) ++correct;
        }
        te.accuracy = static_cast<double>(correct) / static_cast<double>(outputs.rows());
      } else {
        te.loss = mse_loss(outputs, data.gather_targets(idx)).loss;
        te.accuracy = 0.0;
      }
    }
    out.push_back(te);
  }
  return out;
}

namespace {
constexpr std::uint64_t kBatchStream = 0x6261746368;
}

Trainer::Trainer(FrozenHost& host, const Dataset& train_data, const Dataset& eval_data,
                 const TrainConfig& cfg)
    : host_(&host), train_data_(&train_data), eval_data_(&eval_data), cfg_(cfg) {
  cfg_.validate();
  if (host.adapter_layers().empty()) {
    throw ConfigError("trainer: host has no adapters attached; nothing is trainable");
  }
  for (const ParamRef& ref : host.params()) {
    if (ref.trainable) trainable_.push_back(ref);
  }
  adam_.resize(trainable_.size());
}

std::vector<Index> Trainer::batch_indices(Index step) const {
  const Index n = static_cast<Index>(train_data_->samples.size());
  const Index bs = std::min(cfg_.batch_size, n);
  const Index batches_per_epoch = std::max<Index>(1, n / bs);
  const Index epoch = step / batches_per_epoch;
  const Index slot = step % batches_per_epoch;
  Rng rng(mix_seed(mix_seed(cfg_.seed, kBatchStream), static_cast<std::uint64_t>(epoch)));
  const std::vector<Index> perm = random_permutation(n, rng);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(bs));
  for (Index i = slot * bs; i < std::min(n, (slot + 1) * bs); ++i) {
    out.push_back(perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<MetricsRow> Trainer::run(Index steps) {
  if (steps < 0) throw ConfigError("trainer: negative step count");
  std::vector<MetricsRow> appended;
  const auto start = std::chrono::steady_clock::now();
  const Index target = step_ + steps;
  OpCounter counter;
  std::unordered_map<std::string, std::size_t> slot_of;
  for (std::size_t i = 0; i < trainable_.size(); ++i) slot_of[trainable_[i].name] = i;

  while (step_ < target) {
    const std::vector<Index> idx = batch_indices(step_);
    const Matrix inputs = train_data_->gather_inputs(idx);
    std::vector<Index> labels;
    Matrix targets;
    if (train_data_->mode == TaskMode::kClassification) {
      labels = train_data_->gather_labels(idx);
    } else {
      targets = train_data_->gather_targets(idx);
    }
    BatchGrad bg = loss_and_grad(*host_, inputs, labels, targets, cfg_.loss, counter);
    ++step_;
    for (const NamedGrad& g : bg.grads) {
      const auto it = slot_of.find(g.name);
      if (it == slot_of.end()) {
        throw Error("trainer: gradient for unknown parameter '" + g.name + "'");
      }
      Matrix& param = *trainable_[it->second].value;
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        apply_sgd(param, g.grad, cfg_.lr);
      } else {
        apply_adam(param, g.grad, adam_[it->second], step_, cfg_);
      }
    }
    if (step_ % cfg_.eval_every == 0 || step_ == target) {
      MetricsRow row;
      row.step = step_;
      row.train_loss = bg.loss;
      row.per_task = evaluate_per_task(*host_, *eval_data_, cfg_.loss);
      row.wall_time_ms =
          total_wall_ms_ +
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
              .count();
      history_.push_back(row);
      appended.push_back(row);
    }
  }
  total_wall_ms_ +=
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
          .count();
  return appended;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  json j;
  j["version"] = 1;
  j["step"] = step_;
  j["optimizer"] = to_string(cfg_.optimizer);
  j["host"] = {{"dims", host_->dims()}, {"frozen_checksum", host_->frozen_checksum()}};
  json adapters = json::array();
  for (Index l : host_->adapter_layers()) {
    adapters.push_back(
        {{"layer", l}, {"config", adapter_config_to_json(host_->adapter_at(l)->config())}});
  }
  j["adapters"] = adapters;
  json params = json::object();
  for (const ParamRef& ref : trainable_) params[ref.name] = matrix_to_json(*ref.value);
  j["params"] = params;
  if (cfg_.optimizer == OptimizerKind::kAdam) {
    json moments = json::object();
    for (std::size_t i = 0; i < trainable_.size(); ++i) {
      if (adam_[i].m.size() == 0) continue;
      moments[trainable_[i].name] = {{"m", matrix_to_json(adam_[i].m)},
                                     {"v", matrix_to_json(adam_[i].v)}};
    }
    j["adam"] = moments;
  }
  j["rng"] = {{"seed", cfg_.seed}, {"step", step_}};
  std::ofstream out(path);
  if (!out) throw IoError("save_checkpoint: cannot open '" + path.string() + "'");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("save_checkpoint: write to '" + path.string() + "' failed");
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_checkpoint: cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("load_checkpoint: " + std::string(e.what()));
  }
  if (!j.contains("version") || j["version"].get<int>() != 1) {
    throw ParseError("load_checkpoint: unsupported or missing version");
  }
  if (j.at("host").at("dims").get<std::vector<Index>>() != host_->dims()) {
    throw ConfigError("load_checkpoint: host dims mismatch");
  }
  for (const json& a : j.at("adapters")) {
    const Index layer = a.at("layer").get<Index>();
    const Adapter* adapter = host_->adapter_at(layer);
    if (adapter == nullptr) {
      throw ConfigError("load_checkpoint: checkpoint has an adapter at layer " +
                        std::to_string(layer) + " but the host does not");
    }
    const AdapterConfig stored = adapter_config_from_json(a.at("config"));
    const AdapterConfig& live = adapter->config();
    if (stored.kind != live.kind || stored.rank != live.rank ||
        stored.experts != live.experts || stored.router_kind != live.router_kind ||
        stored.d_in != live.d_in || stored.d_out != live.d_out) {
      throw ConfigError("load_checkpoint: adapter config mismatch at layer " +
                        std::to_string(layer));
    }
  }

  // Stage everything before touching live state.
  std::vector<std::pair<Matrix*, Matrix>> staged;
  for (const ParamRef& ref : trainable_) {
    const json& params = j.at("params");
    if (!params.contains(ref.name)) {
      throw ParseError("load_checkpoint: missing parameter '" + ref.name + "'");
    }
    Matrix loaded = matrix_from_json(params.at(ref.name));
    if (loaded.rows() != ref.value->rows() || loaded.cols() != ref.value->cols()) {
      throw ConfigError("load_checkpoint: shape mismatch for '" + ref.name + "': stored " +
                        std::to_string(loaded.rows()) + "x" + std::to_string(loaded.cols()) +
                        ", live " + std::to_string(ref.value->rows()) + "x" +
                        std::to_string(ref.value->cols()));
    }
    staged.emplace_back(ref.value, std::move(loaded));
  }
  std::vector<AdamSlot> staged_adam(trainable_.size());
  if (cfg_.optimizer == OptimizerKind::kAdam && j.contains("adam")) {
    for (std::size_t i = 0; i < trainable_.size(); ++i) {
      const json& moments = j.at("adam");
      if (moments.contains(trainable_[i].name)) {
        staged_adam[i].m = matrix_from_json(moments.at(trainable_[i].name).at("m"));
        staged_adam[i].v = matrix_from_json(moments.at(trainable_[i].name).at("v"));
      }
    }
  }
  const Index step = j.at("step").get<Index>();

  for (auto& [dst, src] : staged) *dst = std::move(src);
  adam_ = std::move(staged_adam);
  step_ = step;
}

std::vector<MetricsRow> train(FrozenHost& host, const Dataset& train_data,
                              const Dataset& eval_data, const TrainConfig& cfg) {
  Trainer trainer(host, train_data, eval_data, cfg);
  return trainer.run(cfg.steps);
}

void write_metrics_csv(const std::vector<MetricsRow>& history, TaskMode mode,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_metrics_csv: cannot open '" + path.string() + "'");
  const std::size_t n_tasks = history.empty() ? 0 : history.front().per_task.size();
  out << "step,train_loss";
  for (std::size_t t = 0; t < n_tasks; ++t) {
    out << ",task" << t << "_loss";
    if (mode == TaskMode::kClassification) out << ",task" << t << "_acc";
  }
  out << ",wall_time_ms\n";
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const MetricsRow& row : history) {
    out << row.step << "," << num(row.train_loss);
    for (const TaskEval& te : row.per_task) {
      out << "," << num(te.loss);
      if (mode == TaskMode::kClassification) out << "," << num(te.accuracy);
    }
    std::snprintf(buf, sizeof buf, "%.3f", row.wall_time_ms);
    out << "," << buf << "\n";
  }
}

}  // namespace peftlab
