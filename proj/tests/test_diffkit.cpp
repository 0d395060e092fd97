// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "peftlab/diffkit.hpp"
#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

using namespace peftlab;

namespace {

// Minimal layer for exercising the checker: y = x*W + broadcast(F) with a
// frozen offset F that must never receive a gradient.
class ToyAffine : public DiffLayer {
 public:
  ToyAffine(Index d_in, Index d_out, std::uint64_t seed) {
    Rng rng(seed);
    w_ = random_normal(d_in, d_out, 0.5, rng);
    frozen_offset_ = random_normal(1, d_out, 0.5, rng);
  }

  Matrix forward(const Matrix& x, OpCounter& counter) override {
    x_ = x;
    return add_row_broadcast(matmul(x, w_, counter), frozen_offset_);
  }

  BackwardResult backward(const Matrix& upstream) override {
    OpCounter scratch;
    BackwardResult r;
    r.param_grads.push_back({"w", matmul(transpose(x_), upstream, scratch)});
    r.input_grad = matmul(upstream, transpose(w_), scratch);
    return r;
  }

  std::vector<ParamRef> params() override {
    return {{"w", &w_, true}, {"offset", &frozen_offset_, false}};
  }

 private:
  Matrix w_, frozen_offset_, x_;
};

}  // namespace

TEST_SUITE("diffkit") {

TEST_CASE("central difference of theta^2 at 3 is 6") {
  Matrix theta(1, 1);
  theta.at(0, 0) = 3.0;
  auto loss = [&theta] { return theta.at(0, 0) * theta.at(0, 0); };
  const auto grads = finite_difference_grad(loss, {&theta}, 1e-5);
  CHECK(grads.front().at(0, 0) == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(theta.at(0, 0) == 3.0);  // restored
}

TEST_CASE("constant function has zero gradient") {
  Matrix theta(3, 2);
  auto loss = [] { return 4.25; };
  const auto grads = finite_difference_grad(loss, {&theta}, 1e-5);
  CHECK(max_abs(grads.front()) == 0.0);
}

TEST_CASE("gradient of a seeded linear form recovers its coefficients") {
  Rng rng(99);
  const Matrix c = random_normal(4, 3, 1.0, rng);
  Matrix theta = random_normal(4, 3, 1.0, rng);
  auto loss = [&] { return dot_all(theta, c); };
  const auto grads = finite_difference_grad(loss, {&theta}, 1e-5);
  CHECK(max_abs_diff(grads.front(), c) < 1e-9);
}

TEST_CASE("non-finite loss is reported with the offending entry") {
  Matrix theta(2, 2);
  theta.at(1, 1) = 1.0;
  auto loss = [&theta] { return 1.0 / (theta.at(1, 1) - 1.00001); };
  // Perturbing entry 3 to +eps = 1.00001 divides by zero.
  CHECK_THROWS_WITH_AS(finite_difference_grad(loss, {&theta}, 1e-5),
                       doctest::Contains("entry 3"), NumericError);
}

TEST_CASE("epsilon must be positive") {
  Matrix theta(1, 1);
  auto loss = [] { return 0.0; };
  CHECK_THROWS_AS(finite_difference_grad(loss, {&theta}, 0.0), ConfigError);
}

TEST_CASE("grad_check passes an affine layer and reports the frozen offset clean") {
  ToyAffine layer(5, 4, 7);
  Rng rng(8);
  const Matrix input = random_normal(6, 5, 1.0, rng);
  const GradCheckReport report = grad_check(layer, input, 1e-5);
  CHECK(report.pass);
  CHECK(report.max_rel_error <= 1e-5);
  // Entries cover the trainable weight and the input.
  REQUIRE(report.entries.size() == 2);
  CHECK(report.entries[0].name == "w");
  CHECK(report.entries[1].name == "input");
}

TEST_CASE("grad_check flags a wrong backward") {
  // Deliberately corrupt layer: backward doubles the true gradient.
  class Wrong : public ToyAffine {
   public:
    using ToyAffine::ToyAffine;
    BackwardResult backward(const Matrix& upstream) override {
      BackwardResult r = ToyAffine::backward(upstream);
      scale_in_place(r.param_grads.front().grad, 2.0);
      return r;
    }
  };
  Wrong layer(4, 3, 5);
  Rng rng(6);
  const GradCheckReport report = grad_check(layer, random_normal(5, 4, 1.0, rng), 1e-5);
  CHECK(!report.pass);
}

}  // TEST_SUITE
