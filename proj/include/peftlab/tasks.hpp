// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "peftlab/matrix.hpp"

namespace peftlab {

enum class TaskMode { kClassification, kRegression };

std::string to_string(TaskMode mode);
TaskMode task_mode_from_string(const std::string& s);

// Frozen labeling rule for one task: a seeded linear map from the feature
// block to the output dim. Classification takes the argmax of the teacher
// scores; regression adds seeded Gaussian noise.
struct TaskSpec {
  Index task_id = 0;
  Matrix teacher;  // feature_dim x d_out
  double noise_std = 0.0;
};

struct Sample {
  std::vector<double> x;  // one-hot task tag (n_tasks slots) then features
  std::vector<double> y;  // regression target; empty in classification mode
  Index label = -1;       // class index; -1 in regression mode
  Index task_id = 0;
};

struct Dataset {
  Index n_tasks = 0;
  std::vector<Index> dims;  // [d_in, d_out]; feature_dim = d_in - n_tasks
  TaskMode mode = TaskMode::kClassification;
  std::uint64_t seed = 0;
  std::string split = "train";
  double noise_std = 0.0;
  std::vector<Sample> samples;

  Index d_in() const { return dims.at(0); }
  Index d_out() const { return dims.at(1); }
  Index feature_dim() const { return d_in() - n_tasks; }

  // Batch assembly: rows of x for the given sample indices.
  Matrix gather_inputs(const std::vector<Index>& indices) const;
  std::vector<Index> gather_labels(const std::vector<Index>& indices) const;
  Matrix gather_targets(const std::vector<Index>& indices) const;
  std::vector<Index> indices_of_task(Index task_id) const;
};

// The teacher of task `task_id` for a generation seed. Deterministic; every
// task draws from its own stream so teachers are pairwise distinct.
TaskSpec make_teacher(Index task_id, std::uint64_t seed, Index feature_dim, Index d_out,
                      double noise_std);

// Deterministic synthetic multi-task data: n_per_task samples per task, each
// a standard-normal feature vector prefixed with the task's one-hot tag.
// Train and eval splits draw from disjoint streams of the same seed.
Dataset gen_multitask(Index n_tasks, Index n_per_task, const std::vector<Index>& dims,
                      std::uint64_t seed, TaskMode mode, const std::string& split = "train",
                      double noise_std = 0.0);

// Line-delimited container: a JSON header {"version","n_tasks","dims","mode",
// "seed","split","noise_std"} then one JSON record per sample. Numbers are
// serialized with round-trip precision, so save/load is bit-exact.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace peftlab
