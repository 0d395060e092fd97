// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "peftlab/error.hpp"
#include "peftlab/matrix.hpp"
#include "peftlab/rng.hpp"

using namespace peftlab;

namespace {

bool bits_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(),
                                       sizeof(double) * a.data().size()) == 0);
}

}  // namespace

TEST_SUITE("linalg") {

TEST_CASE("matmul identity preserves any 2x2 matrix") {
  Rng rng(3);
  const Matrix m = random_normal(2, 2, 1.0, rng);
  const Matrix eye = Matrix::from_rows({{1, 0}, {0, 1}});
  OpCounter c;
  CHECK(bits_equal(matmul(eye, m, c), m));
}

TEST_CASE("matmul hand-checked product") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  OpCounter c;
  const Matrix p = matmul(a, b, c);
  CHECK(p.rows() == 2);
  CHECK(p.cols() == 1);
  CHECK(p.at(0, 0) == 2.0);
  CHECK(p.at(1, 0) == 4.0);
}

TEST_CASE("counter increments per call and by 2mnp flops") {
  Rng rng(5);
  const Matrix a = random_normal(4, 8, 1.0, rng);
  const Matrix b = random_normal(8, 2, 1.0, rng);
  OpCounter c;
  matmul(a, b, c);
  CHECK(c.matmul_calls == 1);
  CHECK(c.flops == 128);  // 2*4*8*2
}

TEST_CASE("flops equal the sum of 2mnp over a random product sequence") {
  Rng rng(7);
  OpCounter c;
  std::uint64_t expected_flops = 0;
  std::uint64_t expected_calls = 0;
  for (int i = 0; i < 10; ++i) {
    const Index m = 1 + rng.uniform_index(6);
    const Index n = 1 + rng.uniform_index(6);
    const Index p = 1 + rng.uniform_index(6);
    matmul(random_normal(m, n, 1.0, rng), random_normal(n, p, 1.0, rng), c);
    expected_flops += 2ull * m * n * p;
    ++expected_calls;
  }
  CHECK(c.matmul_calls == expected_calls);
  CHECK(c.flops == expected_flops);
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  OpCounter c;
  CHECK_THROWS_WITH_AS(matmul(Matrix(2, 3), Matrix(4, 2), c),
                       doctest::Contains("2x3"), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(Matrix(2, 3), Matrix(4, 2), c),
                       doctest::Contains("4x2"), ShapeError);
}

TEST_CASE("matmul is bit-deterministic") {
  Rng rng(11);
  const Matrix a = random_normal(7, 13, 1.0, rng);
  const Matrix b = random_normal(13, 5, 1.0, rng);
  OpCounter c;
  CHECK(bits_equal(matmul(a, b, c), matmul(a, b, c)));
}

TEST_CASE("softmax of symmetric rows") {
  const Matrix m = Matrix::from_rows({{0, 0}});
  const Matrix s = softmax_rows(m);
  CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax analytic values for logits (ln 3, 0)") {
  const Matrix m = Matrix::from_rows({{std::log(3.0), 0.0}});
  const Matrix s = softmax_rows(m);
  CHECK(s.at(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(s.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax survives huge logits via max subtraction") {
  const Matrix m = Matrix::from_rows({{1000.0, 1000.0}});
  const Matrix s = softmax_rows(m);
  CHECK(s.all_finite());
  CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one within 1e-12 on random input") {
  Rng rng(13);
  const Matrix m = random_normal(32, 7, 3.0, rng);
  const Matrix s = softmax_rows(m);
  for (Index i = 0; i < s.rows(); ++i) {
    double sum = 0.0;
    for (Index j = 0; j < s.cols(); ++j) {
      sum += s.at(i, j);
      CHECK(s.at(i, j) > 0.0);
      CHECK(s.at(i, j) < 1.0);
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("split_columns hand case and identity") {
  const Matrix m = Matrix::from_rows({{1, 2, 3, 4}});
  const auto parts = split_columns(m, 2);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0] == Matrix::from_rows({{1, 2}}));
  CHECK(parts[1] == Matrix::from_rows({{3, 4}}));

  const auto whole = split_columns(m, 1);
  REQUIRE(whole.size() == 1);
  CHECK(bits_equal(whole[0], m));
}

TEST_CASE("split_columns rejects non-divisible width") {
  CHECK_THROWS_AS(split_columns(Matrix(3, 5), 2), ShapeError);
}

TEST_CASE("split then concat is the identity") {
  Rng rng(17);
  for (Index k : {1, 2, 3, 4, 6}) {
    const Matrix m = random_normal(5, 12, 1.0, rng);
    CHECK(bits_equal(concat_columns(split_columns(m, k)), m));
  }
}

TEST_CASE("transpose round trip") {
  Rng rng(19);
  const Matrix m = random_normal(4, 9, 1.0, rng);
  CHECK(bits_equal(transpose(transpose(m)), m));
}

TEST_CASE("checksum changes when any entry changes") {
  Rng rng(23);
  Matrix m = random_normal(6, 6, 1.0, rng);
  const std::uint64_t before = checksum(m);
  CHECK(checksum(m) == before);
  m.at(3, 3) += 1e-12;
  CHECK(checksum(m) != before);
}

TEST_CASE("finite inputs stay finite through public ops") {
  Rng rng(29);
  const Matrix a = random_normal(6, 8, 100.0, rng);
  const Matrix b = random_normal(8, 3, 100.0, rng);
  OpCounter c;
  CHECK(matmul(a, b, c).all_finite());
  CHECK(softmax_rows(a).all_finite());
  CHECK(transpose(a).all_finite());
}

}  // TEST_SUITE
