// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

#include "peftlab/matrix.hpp"

namespace peftlab {

// Deterministic xoshiro256++ generator, seeded via splitmix64. The normal
// draw burns exactly two uniforms (Box-Muller, cosine branch) so the
// generator carries no hidden cache and its state is the four words alone.
// Identical seeds produce identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                // [0, 1)
  double uniform(double lo, double hi);
  double normal();                 // mean 0, stddev 1
  Index uniform_index(Index n);    // [0, n), n >= 1

  std::array<std::uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

 private:
  std::array<std::uint64_t, 4> state_;
};

// Stable stream derivation: mixes a base seed with stream tags so that
// independent consumers (tasks, splits, epochs) never share a stream.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng);
Matrix random_uniform(Index rows, Index cols, double lo, double hi, Rng& rng);

// Seeded Fisher-Yates permutation of [0, n).
std::vector<Index> random_permutation(Index n, Rng& rng);

}  // namespace peftlab
