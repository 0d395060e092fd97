// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "peftlab/rng.hpp"

using namespace peftlab;

TEST_SUITE("rng") {

TEST_CASE("same seed gives identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("state round trip resumes the stream") {
  Rng a(7);
  for (int i = 0; i < 10; ++i) a.normal();
  const auto snapshot = a.state();
  const double next = a.uniform();
  Rng b(0);
  b.set_state(snapshot);
  CHECK(b.uniform() == next);
}

TEST_CASE("uniform stays in [0,1) and normal has sane moments") {
  Rng rng(123);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const double g = rng.normal();
    sum += g;
    sum_sq += g * g;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.05);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("mix_seed separates streams") {
  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(mix_seed(1, 2) != mix_seed(2, 2));
}

TEST_CASE("permutation is a bijection") {
  Rng rng(5);
  const auto perm = random_permutation(50, rng);
  std::vector<bool> seen(50, false);
  for (Index i : perm) {
    CHECK(!seen[static_cast<std::size_t>(i)]);
    seen[static_cast<std::size_t>(i)] = true;
  }
}

}  // TEST_SUITE
