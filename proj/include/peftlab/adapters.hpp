// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "peftlab/diffkit.hpp"
#include "peftlab/matrix.hpp"

namespace peftlab {

enum class AdapterKind { kLora, kMoELora, kTeamLora };
enum class RouterKind { kLinearSoftmax, kShapleyInteraction };

std::string to_string(AdapterKind kind);
std::string to_string(RouterKind kind);
AdapterKind adapter_kind_from_string(const std::string& s);
RouterKind router_kind_from_string(const std::string& s);

// Configuration for one adapter. `rank` is the per-expert rank: r for LoRA
// and MoELoRA, r_B for TeamLoRA (whose shared matrix spans r_A = k * r_B
// columns). `experts` is k; LoRA forces k = 1 and has no router. The router
// kind is orthogonal to the expert structure so ablation cells can mix them;
// defaults are linear-softmax for MoELoRA and shapley-interaction for
// TeamLoRA.
struct AdapterConfig {
  AdapterKind kind = AdapterKind::kLora;
  Index d_in = 0;
  Index d_out = 0;
  Index rank = 1;
  Index experts = 1;
  double alpha = 1.0;
  RouterKind router_kind = RouterKind::kLinearSoftmax;
  Index s_hidden = 0;  // 0 -> 2 * experts
  std::uint64_t seed = 0;

  Index shared_rank() const { return experts * rank; }  // r_A
  Index hidden_width() const { return s_hidden > 0 ? s_hidden : 2 * experts; }
  void validate() const;  // throws ConfigError
};

// Per-token routing state: phi are the router's softmax weights (rows sum to
// 1), omega the participations actually applied to expert outputs. For the
// linear-softmax router omega == phi; the shapley-interaction router sets
// omega = phi * M^T with no renormalization, so omega entries may leave
// [0, 1] once M trains away from its nonnegative init.
struct RouterOutput {
  Matrix phi;
  Matrix omega;
};

struct ParamCount {
  std::int64_t adapter_params = 0;  // A/B tensors
  std::int64_t router_params = 0;   // gate tensors incl. biases and M
  std::int64_t total = 0;
};

struct MatmulCount {
  std::int64_t branch_matmuls = 0;
  std::int64_t router_matmuls = 0;
};

// How participations are applied during evaluation. Solo keeps one expert's
// own omega and zeroes the rest; top-1 keeps the per-token argmax entry;
// fixed replaces every row by the given participation vector. Solo and top-1
// optionally renormalize the surviving entries to the row's original mass.
struct ParticipationPolicy {
  enum class Mode { kNormal, kSoloExpert, kTopOne, kFixedRow };
  Mode mode = Mode::kNormal;
  Index expert = -1;
  std::vector<double> row;
  bool renormalize = false;
};

// Common adapter interface. forward computes the auxiliary branch output
// only; the host adds x * W0 itself. After init every branch output is
// exactly zero (all B matrices start at zero).
class Adapter : public DiffLayer {
 public:
  virtual const AdapterConfig& config() const = 0;
  virtual Index expert_count() const = 0;

  // Router state of the most recent forward; empty matrices for LoRA.
  virtual const RouterOutput& router_output() const = 0;

  // Matmul calls observed during the most recent forward, split by phase.
  virtual MatmulCount last_matmul_count() const = 0;

  // Evaluation-only forward with a participation transform applied to the
  // router output. Invalidates any pending backward state.
  virtual Matrix forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                                     OpCounter& counter, RouterOutput* router = nullptr) = 0;
};

// Router interface shared by the multi-expert adapters. forward caches what
// backward needs; backward consumes d(omega) and returns d(input), appending
// its parameter gradients to `grads`.
class Router {
 public:
  virtual ~Router() = default;
  virtual RouterOutput forward(const Matrix& x, OpCounter& counter) = 0;
  virtual Matrix backward(const Matrix& d_omega, std::vector<NamedGrad>& grads) = 0;
  virtual void collect_params(std::vector<ParamRef>& out) = 0;
};

// Single affine map d_in -> k with softmax normalization; omega == phi.
class LinearSoftmaxRouter final : public Router {
 public:
  LinearSoftmaxRouter(Index d_in, Index experts, std::uint64_t seed);
  RouterOutput forward(const Matrix& x, OpCounter& counter) override;
  Matrix backward(const Matrix& d_omega, std::vector<NamedGrad>& grads) override;
  void collect_params(std::vector<ParamRef>& out) override;
  Matrix& weights() { return w_; }

 private:
  Matrix w_;  // d_in x k
  Matrix x_, omega_;
  Matrix logits_;  // work buffer
};

// Two-layer tanh MLP estimating per-expert weights, adjusted by a learnable
// k x k interaction matrix: phi = softmax(mlp(x)), omega = phi * M^T.
class ShapleyInteractionRouter final : public Router {
 public:
  ShapleyInteractionRouter(Index d_in, Index hidden, Index experts, std::uint64_t seed);
  RouterOutput forward(const Matrix& x, OpCounter& counter) override;
  Matrix backward(const Matrix& d_omega, std::vector<NamedGrad>& grads) override;
  void collect_params(std::vector<ParamRef>& out) override;
  Matrix& interaction() { return m_; }

 private:
  Matrix w1_, b1_, w2_, b2_, m_;
  Matrix x_, hidden_out_, phi_;
  Matrix pre2_, omega_;  // work buffers
};

// Classic low-rank branch: out = (alpha/r) * x * A * B.
class LoraAdapter final : public Adapter {
 public:
  explicit LoraAdapter(const AdapterConfig& config);

  Matrix forward(const Matrix& x, OpCounter& counter) override;
  BackwardResult backward(const Matrix& upstream) override;
  std::vector<ParamRef> params() override;
  const AdapterConfig& config() const override { return cfg_; }
  Index expert_count() const override { return 1; }
  const RouterOutput& router_output() const override { return router_out_; }
  MatmulCount last_matmul_count() const override { return last_counts_; }
  Matrix forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                             OpCounter& counter, RouterOutput* router) override;

  Matrix& a() { return a_; }
  Matrix& b() { return b_; }

 private:
  AdapterConfig cfg_;
  Matrix a_, b_;
  Matrix x_, z_;
  bool forward_done_ = false;
  RouterOutput router_out_;
  MatmulCount last_counts_;
};

// k independent expert pairs (A_i, B_i) combined by the router's per-token
// weights. All experts are dense-activated.
class MoELoraAdapter final : public Adapter {
 public:
  explicit MoELoraAdapter(const AdapterConfig& config);

  Matrix forward(const Matrix& x, OpCounter& counter) override;
  BackwardResult backward(const Matrix& upstream) override;
  std::vector<ParamRef> params() override;
  const AdapterConfig& config() const override { return cfg_; }
  Index expert_count() const override { return cfg_.experts; }
  const RouterOutput& router_output() const override { return router_out_; }
  MatmulCount last_matmul_count() const override { return last_counts_; }
  Matrix forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                             OpCounter& counter, RouterOutput* router) override;

  Matrix& expert_a(Index i) { return a_[static_cast<std::size_t>(i)]; }
  Matrix& expert_b(Index i) { return b_[static_cast<std::size_t>(i)]; }
  Router& router() { return *router_; }

  // Expert outputs (alpha/r) * x * A_i * B_i without router weighting.
  std::vector<Matrix> expert_outputs(const Matrix& x, OpCounter& counter) const;

 private:
  AdapterConfig cfg_;
  std::vector<Matrix> a_, b_;
  std::unique_ptr<Router> router_;
  Matrix x_;
  std::vector<Matrix> z_, expert_out_;
  bool forward_done_ = false;
  RouterOutput router_out_;
  MatmulCount last_counts_;
};

// Asymmetric structure: one shared A (domain-agnostic), k plug-in B_i
// (domain-specific). x*A is column-split into k segments, one per expert, so
// the branch costs k+1 matmuls instead of 2k.
class TeamLoraAdapter final : public Adapter {
 public:
  explicit TeamLoraAdapter(const AdapterConfig& config);

  Matrix forward(const Matrix& x, OpCounter& counter) override;
  BackwardResult backward(const Matrix& upstream) override;
  std::vector<ParamRef> params() override;
  const AdapterConfig& config() const override { return cfg_; }
  Index expert_count() const override { return cfg_.experts; }
  const RouterOutput& router_output() const override { return router_out_; }
  MatmulCount last_matmul_count() const override { return last_counts_; }
  Matrix forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                             OpCounter& counter, RouterOutput* router) override;

  // Partial outputs h_i = (alpha/r_B) * split(x*A)_i * B_i.
  std::vector<Matrix> collaboration_outputs(const Matrix& x, OpCounter& counter) const;
  // Router pass alone: phi and the interaction-adjusted omega.
  RouterOutput competition_weights(const Matrix& x, OpCounter& counter);

  Matrix& shared_a() { return a_; }
  Matrix& expert_b(Index i) { return b_[static_cast<std::size_t>(i)]; }
  Router& router() { return *router_; }

 private:
  AdapterConfig cfg_;
  Matrix a_;
  std::vector<Matrix> b_;
  std::unique_ptr<Router> router_;
  Matrix x_, z_;
  std::vector<Matrix> z_parts_, partial_out_;
  bool forward_done_ = false;
  RouterOutput router_out_;
  MatmulCount last_counts_;
};

// Builds a seeded adapter: A ~ N(0, 1/d_in), every B zero (so the branch is
// exactly neutral at init), router weights ~ N(0, 1/fan_in) with zero
// biases, M with unit diagonal and off-diagonal entries ~ U[0, 1).
std::unique_ptr<Adapter> init_adapter(const AdapterConfig& config);

ParamCount param_count(const AdapterConfig& config);

// Analytic matmul counts per forward: branch {LoRA: 2, MoELoRA: 2k,
// TeamLoRA: k+1}, router {none: 0, linear-softmax: 1, shapley-interaction:
// 3}. Cross-checked against OpCounter measurements in the tests.
MatmulCount matmul_count(const AdapterConfig& config);

// Applies the interaction matrix to router weights: omega = phi * M^T, i.e.
// omega[n,i] = sum_j M[i,j] * phi[n,j]. No renormalization.
Matrix apply_interaction(const Matrix& phi, const Matrix& interaction);

}  // namespace peftlab
