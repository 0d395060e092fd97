// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "peftlab/matrix.hpp"

namespace peftlab {

// Named view of a parameter tensor. Frozen parameters (trainable = false)
// never receive gradients.
struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  bool trainable = true;
};

struct NamedGrad {
  std::string name;
  Matrix grad;
};

struct BackwardResult {
  Matrix input_grad;
  std::vector<NamedGrad> param_grads;  // trainable parameters only, in params() order
};

// A layer with a closed-form backward pass. forward caches whatever the
// backward needs; backward is valid only after a forward on the same input.
// Instances are single-threaded.
class DiffLayer {
 public:
  virtual ~DiffLayer() = default;

  virtual Matrix forward(const Matrix& input, OpCounter& counter) = 0;
  virtual BackwardResult backward(const Matrix& upstream) = 0;
  virtual std::vector<ParamRef> params() = 0;
};

struct GradCheckEntry {
  std::string name;  // parameter name, or "input"
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Central differences (f(t+eps) - f(t-eps)) / 2 eps for every entry of every
// listed parameter. loss_fn is re-evaluated with the parameter temporarily
// perturbed in place. Throws NumericError naming the offending entry when a
// perturbed evaluation is non-finite.
std::vector<Matrix> finite_difference_grad(const std::function<double()>& loss_fn,
                                           const std::vector<Matrix*>& params,
                                           double epsilon);

// Compares the layer's analytic gradients against central differences on the
// scalar probe loss sum(G (.) forward(input)) with a seed-fixed G. Checks all
// trainable parameters plus the input gradient; frozen parameters are
// asserted to receive an exactly zero (or absent) gradient. Relative error
// per tensor is max|ga - gfd| / max(max|gfd|, 1e-8).
GradCheckReport grad_check(DiffLayer& layer, const Matrix& input, double tol,
                           double epsilon = 1e-5, std::uint64_t probe_seed = 0x9e1c);

}  // namespace peftlab
