// SPDX-License-Identifier: Apache-2.0
#include "peftlab/tasks.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

using nlohmann::json;

std::string to_string(TaskMode mode) {
  return mode == TaskMode::kClassification ? "classification" : "regression";
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "classification") return TaskMode::kClassification;
  if (s == "regression") return TaskMode::kRegression;
  throw ConfigError("unknown task mode '" + s + "'");
}

Matrix Dataset::gather_inputs(const std::vector<Index>& indices) const {
  Matrix x(static_cast<Index>(indices.size()), d_in());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = samples.at(static_cast<std::size_t>(indices[r]));
    std::copy(s.x.begin(), s.x.end(), x.row_ptr(static_cast<Index>(r)));
  }
  return x;
}

std::vector<Index> Dataset::gather_labels(const std::vector<Index>& indices) const {
  std::vector<Index> labels;
  labels.reserve(indices.size());
  for (Index i : indices) labels.push_back(samples.at(static_cast<std::size_t>(i)).label);
  return labels;
}

Matrix Dataset::gather_targets(const std::vector<Index>& indices) const {
  Matrix y(static_cast<Index>(indices.size()), d_out());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = samples.at(static_cast<std::size_t>(indices[r]));
    std::copy(s.y.begin(), s.y.end(), y.row_ptr(static_cast<Index>(r)));
  }
  return y;
}

std::vector<Index> Dataset::indices_of_task(Index task_id) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].task_id == task_id) out.push_back(static_cast<Index>(i));
  }
  return out;
}

namespace {

constexpr std::uint64_t kTeacherStream = 0x7465616368;  // per-task teacher draws
constexpr std::uint64_t kTrainStream = 0x747261696e;
constexpr std::uint64_t kEvalStream = 0x6576616c;

std::uint64_t split_stream_tag(const std::string& split) {
  if (split == "train") return kTrainStream;
  if (split == "eval") return kEvalStream;
  throw ConfigError("dataset split must be 'train' or 'eval', got '" + split + "'");
}

}  // namespace

TaskSpec make_teacher(Index task_id, std::uint64_t seed, Index feature_dim, Index d_out,
                      double noise_std) {
  Rng rng(mix_seed(mix_seed(seed, kTeacherStream), static_cast<std::uint64_t>(task_id)));
  TaskSpec spec;
  spec.task_id = task_id;
  spec.noise_std = noise_std;
  spec.teacher =
      random_normal(feature_dim, d_out, 1.0 / std::sqrt(static_cast<double>(feature_dim)), rng);
  return spec;
}

Dataset gen_multitask(Index n_tasks, Index n_per_task, const std::vector<Index>& dims,
                      std::uint64_t seed, TaskMode mode, const std::string& split,
                      double noise_std) {
  if (n_tasks < 1) throw ConfigError("gen_multitask: n_tasks must be >= 1");
  if (n_per_task < 1) throw ConfigError("gen_multitask: n_per_task must be >= 1");
  if (dims.size() != 2) throw ConfigError("gen_multitask: dims must be [d_in, d_out]");
  const Index d_in = dims[0];
  const Index d_out = dims[1];
  if (d_in <= n_tasks) {
    throw ConfigError("gen_multitask: d_in " + std::to_string(d_in) +
                      " leaves no feature slots after " + std::to_string(n_tasks) +
                      " task-tag slots");
  }
  const Index feat = d_in - n_tasks;
  const std::uint64_t split_tag = split_stream_tag(split);

  Dataset ds;
  ds.n_tasks = n_tasks;
  ds.dims = dims;
  ds.mode = mode;
  ds.seed = seed;
  ds.split = split;
  ds.noise_std = noise_std;
  ds.samples.reserve(static_cast<std::size_t>(n_tasks * n_per_task));

  OpCounter scratch;
  for (Index t = 0; t < n_tasks; ++t) {
    const TaskSpec teacher = make_teacher(t, seed, feat, d_out, noise_std);
    Rng rng(mix_seed(mix_seed(seed, split_tag), static_cast<std::uint64_t>(t)));
    for (Index n = 0; n < n_per_task; ++n) {
      Sample s;
      s.task_id = t;
      s.x.assign(static_cast<std::size_t>(d_in), 0.0);
      s.x[static_cast<std::size_t>(t)] = 1.0;
      Matrix features(1, feat);
      for (Index f = 0; f < feat; ++f) {
        const double v = rng.normal();
        features.at(0, f) = v;
        s.x[static_cast<std::size_t>(n_tasks + f)] = v;
      }
      const Matrix scores = matmul(features, teacher.teacher, scratch);
      if (mode == TaskMode::kClassification) {
        Index best = 0;
        for (Index c = 1; c < d_out; ++c) {
          if (scores.at(0, c) > scores.at(0, best)) best = c;
        }
        s.label = best;
      } else {
        s.y.resize(static_cast<std::size_t>(d_out));
        for (Index c = 0; c < d_out; ++c) {
          s.y[static_cast<std::size_t>(c)] = scores.at(0, c) + noise_std * rng.normal();
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_dataset: cannot open '" + path.string() + "' for writing");
  json header = {{"version", 1},
                 {"n_tasks", dataset.n_tasks},
                 {"dims", dataset.dims},
                 {"mode", to_string(dataset.mode)},
                 {"seed", dataset.seed},
                 {"split", dataset.split},
                 {"noise_std", dataset.noise_std},
                 {"n_samples", dataset.samples.size()}};
  out << header.dump() << "\n";
  for (const Sample& s : dataset.samples) {
    json rec = {{"x", s.x}, {"task_id", s.task_id}};
    if (dataset.mode == TaskMode::kClassification) {
      rec["y"] = s.label;
    } else {
      rec["y"] = s.y;
    }
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("save_dataset: write to '" + path.string() + "' failed");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dataset: cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("load_dataset: missing header line");

  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError("load_dataset: bad header: " + std::string(e.what()));
  }
  if (!header.contains("version") || !header["version"].is_number_integer()) {
    throw ParseError("load_dataset: header has no integer 'version' field");
  }
  if (header["version"].get<int>() != 1) {
    throw ParseError("load_dataset: unsupported version " +
                     std::to_string(header["version"].get<int>()));
  }

  Dataset ds;
  std::size_t expected = 0;
  try {
    ds.n_tasks = header.at("n_tasks").get<Index>();
    ds.dims = header.at("dims").get<std::vector<Index>>();
    ds.mode = task_mode_from_string(header.at("mode").get<std::string>());
    ds.seed = header.at("seed").get<std::uint64_t>();
    ds.split = header.at("split").get<std::string>();
    ds.noise_std = header.at("noise_std").get<double>();
    expected = header.at("n_samples").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError("load_dataset: bad header field: " + std::string(e.what()));
  }

  std::size_t record_no = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++record_no;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("load_dataset: record " + std::to_string(record_no) + ": " +
                       std::string(e.what()));
    }
    Sample s;
    try {
      s.x = rec.at("x").get<std::vector<double>>();
      s.task_id = rec.at("task_id").get<Index>();
      if (ds.mode == TaskMode::kClassification) {
        s.label = rec.at("y").get<Index>();
      } else {
        s.y = rec.at("y").get<std::vector<double>>();
      }
    } catch (const json::exception& e) {
      throw ParseError("load_dataset: record " + std::to_string(record_no) +
                       " has bad fields: " + std::string(e.what()));
    }
    if (static_cast<Index>(s.x.size()) != ds.d_in()) {
      throw ParseError("load_dataset: record " + std::to_string(record_no) + " has " +
                       std::to_string(s.x.size()) + " input values, expected " +
                       std::to_string(ds.d_in()));
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != expected) {
    throw ParseError("load_dataset: has " + std::to_string(ds.samples.size()) +
                     " records, header declares " + std::to_string(expected));
  }
  return ds;
}

}  // namespace peftlab
