// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>

#include "peftlab/diffkit.hpp"
#include "peftlab/error.hpp"
#include "peftlab/host.hpp"
#include "peftlab/rng.hpp"

using namespace peftlab;

namespace {

bool bits_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(),
                                       sizeof(double) * a.data().size()) == 0);
}

AdapterConfig team_config(Index rank, Index experts, std::uint64_t seed) {
  AdapterConfig cfg;
  cfg.kind = AdapterKind::kTeamLora;
  cfg.router_kind = RouterKind::kShapleyInteraction;
  cfg.rank = rank;
  cfg.experts = experts;
  cfg.alpha = 2.0 * static_cast<double>(rank);
  cfg.seed = seed;
  return cfg;
}

void randomize_adapter_b(FrozenHost& host, std::uint64_t seed) {
  Rng rng(seed);
  for (ParamRef ref : host.params()) {
    if (!ref.trainable) continue;
    const auto dot = ref.name.find('.');
    const std::string tail = ref.name.substr(dot + 1);
    if (tail[0] == 'b' && tail.find("router") == std::string::npos) {
      *ref.value = random_normal(ref.value->rows(), ref.value->cols(), 0.5, rng);
    }
  }
}

}  // namespace

TEST_SUITE("host") {

TEST_CASE("construction is seeded and shape-checked") {
  FrozenHost a({8, 16, 4}, 77);
  FrozenHost b({8, 16, 4}, 77);
  CHECK(a.layer_count() == 2);
  CHECK(a.input_dim() == 8);
  CHECK(a.output_dim() == 4);
  CHECK(a.frozen_checksum() == b.frozen_checksum());
  FrozenHost c({8, 16, 4}, 78);
  CHECK(a.frozen_checksum() != c.frozen_checksum());
  CHECK_THROWS_AS(FrozenHost({5}, 1), ConfigError);
}

TEST_CASE("single identity layer computes x w0 + bias") {
  FrozenHost host({4, 3}, 5, Activation::kIdentity);
  Rng rng(6);
  const Matrix x = random_normal(7, 4, 1.0, rng);
  OpCounter c;
  const Matrix out = host.forward(x, c);
  // Recompute by hand from the (frozen) parameters.
  Matrix w0;
  Matrix bias;
  for (ParamRef ref : host.params()) {
    if (ref.name == "layer0.w0") w0 = *ref.value;
    if (ref.name == "layer0.bias") bias = *ref.value;
  }
  const Matrix expected = add_row_broadcast(matmul(x, w0, c), bias);
  CHECK(bits_equal(out, expected));
}

TEST_CASE("zero input and zero bias give zero output under identity") {
  FrozenHost host({4, 5, 3}, 9, Activation::kIdentity);
  OpCounter c;
  CHECK(max_abs(host.forward(Matrix(2, 4), c)) == 0.0);
}

TEST_CASE("freshly attached adapters leave outputs exactly unchanged") {
  Rng rng(10);
  const Matrix x = random_normal(6, 8, 1.0, rng);
  OpCounter c;
  FrozenHost bare({8, 16, 4}, 11);
  const Matrix before = bare.forward(x, c);

  FrozenHost adapted({8, 16, 4}, 11);
  adapted.attach_adapter(0, team_config(2, 4, 1));
  adapted.attach_adapter(1, team_config(2, 4, 2));
  const Matrix after = adapted.forward(x, c);
  CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("attachment errors: out of range and double attach") {
  FrozenHost host({6, 6}, 3);
  CHECK_THROWS_AS(host.attach_adapter(1, team_config(1, 2, 0)), ConfigError);
  CHECK_THROWS_AS(host.attach_adapter(-1, team_config(1, 2, 0)), ConfigError);
  host.attach_adapter(0, team_config(1, 2, 0));
  CHECK_THROWS_AS(host.attach_adapter(0, team_config(1, 2, 0)), ConfigError);
}

TEST_CASE("host trainables are exactly the adapter parameters") {
  FrozenHost host({6, 6, 6}, 13);
  host.attach_adapter(0, team_config(1, 2, 4));
  Index trainable = 0;
  Index frozen = 0;
  for (const ParamRef& ref : host.params()) {
    if (ref.trainable) {
      ++trainable;
      CHECK(ref.name.find("layer0.") == 0);
    } else {
      ++frozen;
    }
  }
  CHECK(frozen == 4);      // two w0 + two bias
  CHECK(trainable == 1 + 2 + 5);  // a, b0, b1, router mlp (4 tensors) + m
}

TEST_CASE("forward against an independent composition oracle at 3 layers") {
  FrozenHost host({5, 7, 6, 3}, 15);
  host.attach_adapter(0, team_config(1, 2, 6));
  host.attach_adapter(2, team_config(1, 3, 7));
  randomize_adapter_b(host, 16);
  Rng rng(17);
  const Matrix x = random_normal(4, 5, 1.0, rng);
  OpCounter c;
  const Matrix out = host.forward(x, c);

  // Straight-loop re-implementation of the layer rule, independent of the
  // Matrix kernels.
  std::vector<std::vector<double>> cur(4, std::vector<double>(5));
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j) cur[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = x.at(i, j);

  for (Index layer = 0; layer < 3; ++layer) {
    Matrix w0, bias;
    for (ParamRef ref : host.params()) {
      if (ref.name == "layer" + std::to_string(layer) + ".w0") w0 = *ref.value;
      if (ref.name == "layer" + std::to_string(layer) + ".bias") bias = *ref.value;
    }
    Matrix cur_m(4, w0.rows());
    for (std::size_t i = 0; i < 4; ++i)
      for (Index j = 0; j < w0.rows(); ++j) cur_m.at(static_cast<Index>(i), j) = cur[i][static_cast<std::size_t>(j)];
    std::vector<std::vector<double>> next(
        4, std::vector<double>(static_cast<std::size_t>(w0.cols()), 0.0));
    for (std::size_t i = 0; i < 4; ++i) {
      for (Index jj = 0; jj < w0.cols(); ++jj) {
        double acc = 0.0;
        for (Index l = 0; l < w0.rows(); ++l) acc += cur[i][static_cast<std::size_t>(l)] * w0.at(l, jj);
        next[i][static_cast<std::size_t>(jj)] = acc + bias.at(0, jj);
      }
    }
    Adapter* adapter = host.adapter_at(layer);
    if (adapter != nullptr) {
      OpCounter scratch;
      ParticipationPolicy none;
      const Matrix branch = adapter->forward_with_policy(cur_m, none, scratch);
      for (std::size_t i = 0; i < 4; ++i)
        for (Index jj = 0; jj < w0.cols(); ++jj) next[i][static_cast<std::size_t>(jj)] += branch.at(static_cast<Index>(i), jj);
    }
    for (auto& row : next)
      for (double& v : row) v = v > 0.0 ? v : 0.0;  // relu
    cur = std::move(next);
  }
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 3; ++j) {
      CHECK(out.at(i, j) ==
            doctest::Approx(cur[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])
                .epsilon(1e-12));
    }
  }
}

TEST_CASE("end-to-end gradients through a 2-layer host pass the checker") {
  FrozenHost host({6, 5, 4}, 19, Activation::kRelu);
  host.attach_adapter(0, team_config(1, 4, 8));
  host.attach_adapter(1, team_config(1, 2, 9));
  randomize_adapter_b(host, 20);
  Rng rng(21);
  const Matrix x = random_normal(5, 6, 1.0, rng);
  const GradCheckReport report = grad_check(host, x, 1e-5);
  CHECK(report.pass);
}

TEST_CASE("host without adapters has no gradients to give") {
  FrozenHost host({4, 4}, 23);
  Rng rng(24);
  OpCounter c;
  host.forward(random_normal(3, 4, 1.0, rng), c);
  const BackwardResult back = host.backward(Matrix(3, 4));
  CHECK(back.param_grads.empty());
}

TEST_CASE("relu blocks gradient flow at dead units") {
  // One layer, identity weights region: craft a pre-activation that is
  // negative for one unit and check its input gradient column is zero.
  FrozenHost host({2, 2}, 25, Activation::kRelu);
  Matrix* w0 = nullptr;
  Matrix* bias = nullptr;
  for (ParamRef ref : host.params()) {
    if (ref.name == "layer0.w0") w0 = ref.value;
    if (ref.name == "layer0.bias") bias = ref.value;
  }
  *w0 = Matrix::from_rows({{1, 0}, {0, 1}});
  *bias = Matrix::from_rows({{0.0, -5.0}});  // unit 1 dead for small inputs
  OpCounter c;
  host.forward(Matrix::from_rows({{0.5, 0.5}}), c);
  Matrix upstream = Matrix::from_rows({{1.0, 1.0}});
  const BackwardResult back = host.backward(upstream);
  CHECK(back.input_grad.at(0, 0) == 1.0);
  CHECK(back.input_grad.at(0, 1) == 0.0);
}

TEST_CASE("eval_forward collects router traces per layer") {
  FrozenHost host({6, 6, 6}, 27);
  host.attach_adapter(0, team_config(1, 3, 10));
  Rng rng(28);
  OpCounter c;
  ForwardTrace trace;
  host.eval_forward(random_normal(4, 6, 1.0, rng), c, &trace);
  REQUIRE(trace.layers.size() == 2);
  CHECK(trace.layers[0].has_adapter);
  CHECK(trace.layers[0].expert_count == 3);
  CHECK(trace.layers[0].router.omega.rows() == 4);
  CHECK(trace.layers[0].router.omega.cols() == 3);
  CHECK(!trace.layers[1].has_adapter);
}

}  // TEST_SUITE
