// SPDX-License-Identifier: Apache-2.0
#include "peftlab/diffkit.hpp"

#include <cmath>

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

std::vector<Matrix> finite_difference_grad(const std::function<double()>& loss_fn,
                                           const std::vector<Matrix*>& params,
                                           double epsilon) {
  if (!(epsilon > 0.0)) {
    throw ConfigError("finite_difference_grad: epsilon must be positive");
  }
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix* param = params[p];
    Matrix grad(param->rows(), param->cols());
    for (Index i = 0; i < param->size(); ++i) {
      const double original = param->data()[i];
      param->data()[i] = original + epsilon;
      const double plus = loss_fn();
      param->data()[i] = original - epsilon;
      const double minus = loss_fn();
      param->data()[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("finite_difference_grad: non-finite loss at parameter " +
                           std::to_string(p) + " entry " + std::to_string(i));
      }
      grad.data()[i] = (plus - minus) / (2.0 * epsilon);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

namespace {

double tensor_rel_error(const Matrix& analytic, const Matrix& fd) {
  const double denom = std::max(max_abs(fd), 1e-8);
  return max_abs_diff(analytic, fd) / denom;
}

}  // namespace

GradCheckReport grad_check(DiffLayer& layer, const Matrix& input, double tol,
                           double epsilon, std::uint64_t probe_seed) {
  GradCheckReport report;
  report.tol = tol;

  Matrix x = input;
  OpCounter scratch;
  const Matrix out0 = layer.forward(x, scratch);

  Rng probe_rng(probe_seed);
  const Matrix probe = random_normal(out0.rows(), out0.cols(), 1.0, probe_rng);

  const BackwardResult analytic = layer.backward(probe);

  auto probe_loss = [&]() {
    OpCounter c;
    return dot_all(probe, layer.forward(x, c));
  };

  std::vector<ParamRef> refs = layer.params();

  // Frozen parameters must not appear in the gradient list, or appear as
  // exact zeros.
  for (const ParamRef& ref : refs) {
    if (ref.trainable) continue;
    for (const NamedGrad& g : analytic.param_grads) {
      if (g.name == ref.name && max_abs(g.grad) != 0.0) {
        report.entries.push_back({ref.name + " (frozen)", max_abs(g.grad)});
        report.max_rel_error = std::max(report.max_rel_error, max_abs(g.grad));
      }
    }
  }

  for (const ParamRef& ref : refs) {
    if (!ref.trainable) continue;
    const NamedGrad* found = nullptr;
    for (const NamedGrad& g : analytic.param_grads) {
      if (g.name == ref.name) {
        found = &g;
        break;
      }
    }
    if (found == nullptr) {
      throw Error("grad_check: no analytic gradient reported for trainable parameter '" +
                  ref.name + "'");
    }
    const std::vector<Matrix> fd =
        finite_difference_grad(probe_loss, {ref.value}, epsilon);
    const double err = tensor_rel_error(found->grad, fd.front());
    report.entries.push_back({ref.name, err});
    report.max_rel_error = std::max(report.max_rel_error, err);
  }

  {
    const std::vector<Matrix> fd_input =
        finite_difference_grad(probe_loss, {&x}, epsilon);
    const double err = tensor_rel_error(analytic.input_grad, fd_input.front());
    report.entries.push_back({"input", err});
    report.max_rel_error = std::max(report.max_rel_error, err);
  }

  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace peftlab
