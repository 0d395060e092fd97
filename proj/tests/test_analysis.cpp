// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "peftlab/analysis.hpp"
#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"
#include "support/shapley_quadrature.hpp"

using namespace peftlab;

namespace {

AdapterConfig routed_config(AdapterKind kind, Index rank, Index k, std::uint64_t seed) {
  AdapterConfig cfg;
  cfg.kind = kind;
  cfg.router_kind = kind == AdapterKind::kTeamLora ? RouterKind::kShapleyInteraction
                                                   : RouterKind::kLinearSoftmax;
  cfg.rank = rank;
  cfg.experts = k;
  cfg.alpha = 2.0 * static_cast<double>(rank);
  cfg.seed = seed;
  return cfg;
}

struct Fixture {
  Dataset eval_data;
  FrozenHost host;
};

// Single-layer host with a routed adapter whose experts are nonzero.
Fixture analysis_fixture(AdapterKind kind, Index k, std::uint64_t seed,
                         Index eval_per_task = 48) {
  const Index n_tasks = 2;
  const Index d_in = n_tasks + 14;
  const Index classes = 4;
  Fixture f{gen_multitask(n_tasks, eval_per_task, {d_in, classes}, seed,
                          TaskMode::kClassification, "eval"),
            FrozenHost({d_in, classes}, mix_seed(seed, 1))};
  f.host.attach_adapter(0, routed_config(kind, 2, k, mix_seed(seed, 2)));
  Rng rng(mix_seed(seed, 3));
  for (ParamRef ref : f.host.params()) {
    if (!ref.trainable) continue;
    const auto tail = ref.name.substr(ref.name.find('.') + 1);
    if (tail[0] == 'b' && tail.find("router") == std::string::npos) {
      *ref.value = random_normal(ref.value->rows(), ref.value->cols(), 0.8, rng);
    }
  }
  return f;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("bench: an architecture against itself sits near ratio one") {
  const AdapterConfig lora = [] {
    AdapterConfig c;
    c.kind = AdapterKind::kLora;
    c.d_in = 64;
    c.d_out = 64;
    c.rank = 4;
    c.alpha = 8.0;
    c.seed = 3;
    return c;
  }();
  const auto entries = bench_adapters({lora, lora}, 16, 30, 5, 1);
  REQUIRE(entries.size() == 2);
  const double ratio = entries[0].median_forward_us / entries[1].median_forward_us;
  CHECK(ratio > 0.5);
  CHECK(ratio < 2.0);
}

TEST_CASE("bench: counts check out and flops are consistent") {
  BenchOptions opts;
  opts.d = 64;
  opts.batch = 8;
  opts.trials = 5;
  opts.warmup = 2;
  opts.rank = 2;
  opts.expert_counts = {1, 2, 4};
  const CostReport report = latency_bench(opts);
  CHECK(report.all_counts_match);
  REQUIRE(report.groups.size() == 3);
  for (const BenchGroup& g : report.groups) {
    CHECK(g.lora.measured.branch_matmuls == 2);
    CHECK(g.moelora.measured.branch_matmuls == 2 * g.experts);
    CHECK(g.teamlora.measured.branch_matmuls == g.experts + 1);
    CHECK(g.moelora.measured.router_matmuls == 1);
    CHECK(g.teamlora.measured.router_matmuls == 3);
    // Matched parameter budget across the trio.
    CHECK(g.lora.params.adapter_params == g.moelora.params.adapter_params);
    CHECK(g.moelora.params.adapter_params == g.teamlora.params.adapter_params);
    CHECK(g.teamlora.median_forward_us > 0.0);
  }
  // Degenerate single-expert group: the branch collapses to plain lora cost.
  CHECK(report.groups[0].teamlora.measured.branch_matmuls ==
        report.groups[0].lora.measured.branch_matmuls);
}

TEST_CASE("utilization: fresh router spreads load nearly uniformly") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 4, 21, 128);
  const LoadReport report = expert_utilization(f.host, f.eval_data);
  CHECK(report.experts == 4);
  const double max_entropy = std::log(4.0);
  for (double e : report.entropy) {
    CHECK(e <= max_entropy + 1e-12);
    CHECK(e >= 0.95 * max_entropy);
  }
  for (double s : report.mean_omega_row_sum) {
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(report.negative_omega_frequency == 0.0);
}

TEST_CASE("utilization: a single routed expert has zero entropy") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 1, 23);
  const LoadReport report = expert_utilization(f.host, f.eval_data);
  CHECK(report.experts == 1);
  for (double e : report.entropy) CHECK(e == 0.0);
  for (const auto& row : report.argmax_freq) {
    CHECK(row.front() == doctest::Approx(1.0));
  }
}

TEST_CASE("utilization: entropy never exceeds ln k") {
  for (Index k : {2, 3, 4, 8}) {
    Fixture f = analysis_fixture(AdapterKind::kTeamLora, k, 100 + static_cast<std::uint64_t>(k));
    const LoadReport report = expert_utilization(f.host, f.eval_data);
    for (double e : report.entropy) {
      CHECK(e >= 0.0);
      CHECK(e <= std::log(static_cast<double>(k)) + 1e-12);
    }
  }
}

TEST_CASE("utilization requires a routed adapter") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 2, 25);
  FrozenHost bare({4, 3}, 1);
  CHECK_THROWS_AS(expert_utilization(bare, f.eval_data), ConfigError);
}

TEST_CASE("retention: single expert makes top-1 identical to all") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 1, 27);
  const RetentionReport report = top1_retention(f.host, f.eval_data, LossKind::kCrossEntropy);
  CHECK(report.top1_score == report.all_score);
  CHECK(report.retention_ratio == doctest::Approx(1.0));
}

TEST_CASE("retention: duplicated experts earn identical solo scores") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 3, 29);
  auto* moe = dynamic_cast<MoELoraAdapter*>(f.host.adapter_at(0));
  REQUIRE(moe != nullptr);
  for (Index i = 1; i < 3; ++i) {
    moe->expert_a(i) = moe->expert_a(0);
    moe->expert_b(i) = moe->expert_b(0);
  }
  auto* router = dynamic_cast<LinearSoftmaxRouter*>(&moe->router());
  REQUIRE(router != nullptr);
  Matrix& w = router->weights();
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index ccol = 1; ccol < 3; ++ccol) w.at(r, ccol) = w.at(r, 0);
  }
  const RetentionReport report = top1_retention(f.host, f.eval_data, LossKind::kCrossEntropy);
  CHECK(report.solo_scores[0] == report.solo_scores[1]);
  CHECK(report.solo_scores[1] == report.solo_scores[2]);

  // With renormalization the lone survivor carries the whole row mass, so a
  // solo pass reproduces full inference for identical experts.
  const RetentionReport renorm =
      top1_retention(f.host, f.eval_data, LossKind::kCrossEntropy, true);
  CHECK(renorm.solo_scores[0] == doctest::Approx(renorm.all_score));
}

TEST_CASE("shapley: a zero expert contributes exactly nothing") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 2, 31);
  auto* moe = dynamic_cast<MoELoraAdapter*>(f.host.adapter_at(0));
  moe->expert_b(1) = Matrix(2, 4);  // zero B
  const ShapleyEstimate est = shapley_mc(f.host, f.eval_data, 1, 200, 5);
  CHECK(est.phi_hat == 0.0);
  CHECK(est.std_error == 0.0);
}

TEST_CASE("shapley: estimates are seed-deterministic") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 2, 33);
  const ShapleyEstimate a = shapley_mc(f.host, f.eval_data, 0, 150, 7);
  const ShapleyEstimate b = shapley_mc(f.host, f.eval_data, 0, 150, 7);
  CHECK(a.phi_hat == b.phi_hat);
  const ShapleyEstimate c = shapley_mc(f.host, f.eval_data, 0, 150, 8);
  CHECK(a.phi_hat != c.phi_hat);
}

TEST_CASE("shapley: identical experts have symmetric attributions") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 2, 35);
  auto* moe = dynamic_cast<MoELoraAdapter*>(f.host.adapter_at(0));
  moe->expert_a(1) = moe->expert_a(0);
  moe->expert_b(1) = moe->expert_b(0);
  const ShapleyEstimate a = shapley_mc(f.host, f.eval_data, 0, 2000, 11);
  const ShapleyEstimate b = shapley_mc(f.host, f.eval_data, 1, 2000, 12);
  const double band = 3.0 * (a.std_error + b.std_error);
  CHECK(std::fabs(a.phi_hat - b.phi_hat) <= band);
}

TEST_CASE("shapley: monte carlo agrees with grid quadrature at k=2") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 2, 37);
  const double grid =
      testsupport::shapley_grid_k2(f.host, f.eval_data, 0, 101, LossKind::kCrossEntropy);
  const ShapleyEstimate mc = shapley_mc(f.host, f.eval_data, 0, 10000, 13);
  REQUIRE(std::fabs(grid) > 1e-4);  // fixture keeps the signal well off zero
  CHECK(std::fabs(mc.phi_hat - grid) / std::fabs(grid) <= 0.02);
}

TEST_CASE("shapley: k=3 sampler matches the two-dimensional quadrature") {
  Fixture f = analysis_fixture(AdapterKind::kTeamLora, 3, 39, 24);
  const double grid =
      testsupport::shapley_grid_k3(f.host, f.eval_data, 1, 41, LossKind::kCrossEntropy);
  const ShapleyEstimate mc = shapley_mc(f.host, f.eval_data, 1, 8000, 17);
  REQUIRE(std::fabs(grid) > 1e-4);
  CHECK(std::fabs(mc.phi_hat - grid) <=
        std::max(0.03 * std::fabs(grid), 4.0 * mc.std_error));
}

TEST_CASE("shapley rejects degenerate setups") {
  Fixture f = analysis_fixture(AdapterKind::kMoELora, 1, 41);
  CHECK_THROWS_AS(shapley_mc(f.host, f.eval_data, 0, 200, 1), ConfigError);
  Fixture g = analysis_fixture(AdapterKind::kMoELora, 2, 43);
  CHECK_THROWS_AS(shapley_mc(g.host, g.eval_data, 5, 200, 1), ConfigError);
  CHECK_THROWS_AS(shapley_mc(g.host, g.eval_data, 0, 50, 1), ConfigError);
}

TEST_CASE("ablation grid: structure, budgets and determinism") {
  AblationOptions opts;
  opts.host_dims = {12, 16, 4};
  opts.adapter_layers = {0, 1};
  opts.rank = 1;
  opts.experts = 2;
  opts.alpha = 2.0;
  opts.n_tasks = 2;
  opts.n_per_task = 64;
  opts.eval_per_task = 32;
  opts.train.steps = 40;
  opts.train.batch_size = 16;
  opts.train.lr = 0.02;
  opts.train.eval_every = 40;
  opts.n_seeds = 2;
  opts.seed = 5;

  const AblationGrid grid = ablation_grid(opts);
  REQUIRE(grid.cells.size() == 4);
  CHECK(grid.cells[0].kind == AdapterKind::kMoELora);
  CHECK(grid.cells[0].router == RouterKind::kLinearSoftmax);
  CHECK(grid.cells[3].kind == AdapterKind::kTeamLora);
  CHECK(grid.cells[3].router == RouterKind::kShapleyInteraction);
  for (const AblationCell& cell : grid.cells) {
    CHECK(cell.accuracy_per_seed.size() == 2);
    CHECK(cell.params.adapter_params == grid.cells[0].params.adapter_params);
    for (double a : cell.accuracy_per_seed) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
  }
  CHECK(grid.team_wins_vs_moe <= 2);

  const AblationGrid again = ablation_grid(opts);
  for (std::size_t v = 0; v < 4; ++v) {
    CHECK(again.cells[v].accuracy_per_seed == grid.cells[v].accuracy_per_seed);
    CHECK(again.cells[v].loss_per_seed == grid.cells[v].loss_per_seed);
  }
}

}  // TEST_SUITE
