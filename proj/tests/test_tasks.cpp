// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/tasks.hpp"

using namespace peftlab;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("peftlab_test_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE("tasks") {

TEST_CASE("generation is deterministic per seed") {
  const Dataset a = gen_multitask(3, 20, {10, 6}, 42, TaskMode::kClassification);
  const Dataset b = gen_multitask(3, 20, {10, 6}, 42, TaskMode::kClassification);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].x == b.samples[i].x);
    CHECK(a.samples[i].label == b.samples[i].label);
  }
  const Dataset c = gen_multitask(3, 20, {10, 6}, 43, TaskMode::kClassification);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.samples.size() && !any_diff; ++i) {
    any_diff = a.samples[i].x != c.samples[i].x;
  }
  CHECK(any_diff);
}

TEST_CASE("sample counts, tags and splits") {
  const Dataset train = gen_multitask(4, 256, {16, 8}, 7, TaskMode::kClassification, "train");
  CHECK(train.samples.size() == 1024);
  for (Index t = 0; t < 4; ++t) {
    CHECK(train.indices_of_task(t).size() == 256);
  }
  for (const Sample& s : train.samples) {
    // one-hot prefix matches the task id
    for (Index slot = 0; slot < 4; ++slot) {
      CHECK(s.x[static_cast<std::size_t>(slot)] == (slot == s.task_id ? 1.0 : 0.0));
    }
    CHECK(s.label >= 0);
    CHECK(s.label < 8);
  }
  const Dataset eval = gen_multitask(4, 256, {16, 8}, 7, TaskMode::kClassification, "eval");
  bool differs = false;
  for (std::size_t i = 0; i < train.samples.size() && !differs; ++i) {
    differs = train.samples[i].x != eval.samples[i].x;
  }
  CHECK(differs);  // disjoint seed streams
}

TEST_CASE("teachers are pairwise distinct") {
  const Index feat = 12;
  std::vector<std::uint64_t> sums;
  for (Index t = 0; t < 6; ++t) {
    const TaskSpec spec = make_teacher(t, 9, feat, 8, 0.0);
    sums.push_back(checksum(spec.teacher));
  }
  for (std::size_t i = 0; i < sums.size(); ++i) {
    for (std::size_t j = i + 1; j < sums.size(); ++j) CHECK(sums[i] != sums[j]);
  }
}

TEST_CASE("relabeling with the stored teacher reproduces stored labels") {
  const Dataset ds = gen_multitask(3, 64, {11, 5}, 31, TaskMode::kClassification);
  OpCounter c;
  for (const Sample& s : ds.samples) {
    const TaskSpec teacher = make_teacher(s.task_id, ds.seed, ds.feature_dim(), ds.d_out(),
                                          ds.noise_std);
    Matrix features(1, ds.feature_dim());
    for (Index f = 0; f < ds.feature_dim(); ++f) {
      features.at(0, f) = s.x[static_cast<std::size_t>(ds.n_tasks + f)];
    }
    const Matrix scores = matmul(features, teacher.teacher, c);
    Index best = 0;
    for (Index k = 1; k < ds.d_out(); ++k) {
      if (scores.at(0, k) > scores.at(0, best)) best = k;
    }
    CHECK(best == s.label);
  }
}

TEST_CASE("regression targets carry teacher scores plus seeded noise") {
  const Dataset ds = gen_multitask(2, 32, {8, 3}, 13, TaskMode::kRegression, "train", 0.1);
  for (const Sample& s : ds.samples) {
    REQUIRE(s.y.size() == 3);
    CHECK(s.label == -1);
  }
  // noise-free regeneration differs (noise was added)
  const Dataset clean = gen_multitask(2, 32, {8, 3}, 13, TaskMode::kRegression, "train", 0.0);
  bool differs = false;
  for (std::size_t i = 0; i < ds.samples.size() && !differs; ++i) {
    differs = ds.samples[i].y != clean.samples[i].y;
  }
  CHECK(differs);
}

TEST_CASE("class frequencies sit within 3 sigma of a large-sample estimate") {
  const Index n_tasks = 2;
  const Index n_per_task = 2048;
  const Dataset ds = gen_multitask(n_tasks, n_per_task, {10, 4}, 77,
                                   TaskMode::kClassification);
  // Estimate class probabilities with a fresh large draw through the same
  // teachers (independent features, same labeling rule).
  const Index big = 50000;
  OpCounter c;
  for (Index t = 0; t < n_tasks; ++t) {
    const TaskSpec teacher = make_teacher(t, 77, ds.feature_dim(), 4, 0.0);
    std::vector<double> p(4, 0.0);
    Rng rng(mix_seed(991, static_cast<std::uint64_t>(t)));
    for (Index i = 0; i < big; ++i) {
      Matrix f(1, ds.feature_dim());
      for (Index j = 0; j < ds.feature_dim(); ++j) f.at(0, j) = rng.normal();
      const Matrix scores = matmul(f, teacher.teacher, c);
      Index best = 0;
      for (Index k = 1; k < 4; ++k) {
        if (scores.at(0, k) > scores.at(0, best)) best = k;
      }
      p[static_cast<std::size_t>(best)] += 1.0;
    }
    for (double& v : p) v /= static_cast<double>(big);

    std::vector<double> counts(4, 0.0);
    for (Index idx : ds.indices_of_task(t)) {
      counts[static_cast<std::size_t>(ds.samples[static_cast<std::size_t>(idx)].label)] += 1.0;
    }
    for (std::size_t k = 0; k < 4; ++k) {
      const double expected = static_cast<double>(n_per_task) * p[k];
      const double sigma = std::sqrt(static_cast<double>(n_per_task) * p[k] * (1.0 - p[k]));
      CHECK(std::fabs(counts[k] - expected) <= 3.0 * sigma + 1.0);
    }
  }
}

TEST_CASE("save then load round-trips bit-exactly") {
  const Dataset ds = gen_multitask(3, 40, {9, 4}, 55, TaskMode::kClassification);
  const auto path = temp_file("roundtrip.jsonl");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  CHECK(back.n_tasks == ds.n_tasks);
  CHECK(back.dims == ds.dims);
  CHECK(back.mode == ds.mode);
  CHECK(back.seed == ds.seed);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].x == ds.samples[i].x);  // exact doubles
    CHECK(back.samples[i].label == ds.samples[i].label);
    CHECK(back.samples[i].task_id == ds.samples[i].task_id);
  }
  // Saving the loaded dataset reproduces the file byte-for-byte.
  const auto path2 = temp_file("roundtrip2.jsonl");
  save_dataset(back, path2);
  CHECK(slurp(path) == slurp(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("truncated file fails to parse, returning nothing") {
  const Dataset ds = gen_multitask(2, 10, {8, 3}, 5, TaskMode::kClassification);
  const auto path = temp_file("truncated.jsonl");
  save_dataset(ds, path);
  std::string text = slurp(path);
  std::ofstream out(path);
  out << text.substr(0, text.size() * 2 / 3);
  out.close();
  CHECK_THROWS_AS(load_dataset(path), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("unsupported version is rejected explicitly") {
  const auto path = temp_file("badversion.jsonl");
  std::ofstream out(path);
  out << R"({"version":9,"n_tasks":1,"dims":[4,2],"mode":"classification","seed":0,"split":"train","noise_std":0,"n_samples":0})"
      << "\n";
  out.close();
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("version"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("generation rejects degenerate shapes") {
  CHECK_THROWS_AS(gen_multitask(0, 4, {8, 3}, 1, TaskMode::kClassification), ConfigError);
  CHECK_THROWS_AS(gen_multitask(2, 0, {8, 3}, 1, TaskMode::kClassification), ConfigError);
  CHECK_THROWS_AS(gen_multitask(8, 4, {8, 3}, 1, TaskMode::kClassification), ConfigError);
}

}  // TEST_SUITE
