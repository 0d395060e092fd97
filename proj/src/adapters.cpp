// SPDX-License-Identifier: Apache-2.0
#include "peftlab/adapters.hpp"

#include <cmath>

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

std::string to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::kLora: return "lora";
    case AdapterKind::kMoELora: return "moelora";
    case AdapterKind::kTeamLora: return "teamlora";
  }
  return "?";
}

std::string to_string(RouterKind kind) {
  switch (kind) {
    case RouterKind::kLinearSoftmax: return "linear-softmax";
    case RouterKind::kShapleyInteraction: return "shapley-interaction";
  }
  return "?";
}

AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "lora") return AdapterKind::kLora;
  if (s == "moelora") return AdapterKind::kMoELora;
  if (s == "teamlora") return AdapterKind::kTeamLora;
  throw ConfigError("unknown adapter kind '" + s + "'");
}

RouterKind router_kind_from_string(const std::string& s) {
  if (s == "linear-softmax") return RouterKind::kLinearSoftmax;
  if (s == "shapley-interaction") return RouterKind::kShapleyInteraction;
  throw ConfigError("unknown router kind '" + s + "'");
}

void AdapterConfig::validate() const {
  if (d_in < 1 || d_out < 1) {
    throw ConfigError("adapter dims must be >= 1, got " + std::to_string(d_in) + "x" +
                      std::to_string(d_out));
  }
  if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
  if (experts < 1) {
    throw ConfigError("adapter expert count must be >= 1, got " + std::to_string(experts));
  }
  if (kind == AdapterKind::kLora && experts != 1) {
    throw ConfigError("lora has no experts; got k=" + std::to_string(experts));
  }
  if (s_hidden < 0) throw ConfigError("s_hidden must be >= 0");
  if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
}

namespace {

void require_input_width(const Matrix& x, Index d_in, const char* who) {
  if (x.cols() != d_in) {
    throw ShapeError(std::string(who) + ": input is " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + ", adapter expects width " +
                     std::to_string(d_in));
  }
}

// out[n,:] = weights[n, column] * m[n,:]
Matrix scale_rows_by_column(const Matrix& m, const Matrix& weights, Index column) {
  Matrix out(m.rows(), m.cols());
  for (Index n = 0; n < m.rows(); ++n) {
    const double w = weights.at(n, column);
    const double* src = m.row_ptr(n);
    double* dst = out.row_ptr(n);
    for (Index j = 0; j < m.cols(); ++j) dst[j] = w * src[j];
  }
  return out;
}

// Accumulates weights[n, column] * part[n,:] into out.
void accumulate_weighted(Matrix& out, const Matrix& part, const Matrix& weights,
                         Index column) {
  const Index cols = out.cols();
  const double* __restrict__ src_all = part.data().data();
  double* __restrict__ dst_all = out.data().data();
  for (Index n = 0; n < out.rows(); ++n) {
    const double w = weights.at(n, column);
    const double* src = src_all + n * cols;
    double* dst = dst_all + n * cols;
    for (Index j = 0; j < cols; ++j) dst[j] += w * src[j];
  }
}

// d(logits) for out = softmax_rows(logits):
// d_logits[n,i] = out[n,i] * (d_out[n,i] - sum_j d_out[n,j] * out[n,j]).
Matrix softmax_backward(const Matrix& softmax_out, const Matrix& d_out) {
  Matrix d_logits(softmax_out.rows(), softmax_out.cols());
  for (Index n = 0; n < softmax_out.rows(); ++n) {
    const double* o = softmax_out.row_ptr(n);
    const double* g = d_out.row_ptr(n);
    double inner = 0.0;
    for (Index j = 0; j < softmax_out.cols(); ++j) inner += g[j] * o[j];
    double* dst = d_logits.row_ptr(n);
    for (Index j = 0; j < softmax_out.cols(); ++j) dst[j] = o[j] * (g[j] - inner);
  }
  return d_logits;
}

// Per-token participations after applying an evaluation policy.
Matrix apply_policy(const Matrix& omega, const ParticipationPolicy& policy) {
  using Mode = ParticipationPolicy::Mode;
  const Index n_rows = omega.rows();
  const Index k = omega.cols();
  switch (policy.mode) {
    case Mode::kNormal:
      return omega;
    case Mode::kSoloExpert: {
      if (policy.expert < 0 || policy.expert >= k) {
        throw ConfigError("participation policy: expert index " +
                          std::to_string(policy.expert) + " out of range for k=" +
                          std::to_string(k));
      }
      Matrix out(n_rows, k);
      for (Index n = 0; n < n_rows; ++n) {
        double kept = omega.at(n, policy.expert);
        if (policy.renormalize) {
          double total = 0.0;
          for (Index j = 0; j < k; ++j) total += omega.at(n, j);
          kept = total;  // survivor carries the row's full mass
        }
        out.at(n, policy.expert) = kept;
      }
      return out;
    }
    case Mode::kTopOne: {
      Matrix out(n_rows, k);
      for (Index n = 0; n < n_rows; ++n) {
        Index best = 0;
        for (Index j = 1; j < k; ++j) {
          if (omega.at(n, j) > omega.at(n, best)) best = j;
        }
        double kept = omega.at(n, best);
        if (policy.renormalize) {
          double total = 0.0;
          for (Index j = 0; j < k; ++j) total += omega.at(n, j);
          kept = total;
        }
        out.at(n, best) = kept;
      }
      return out;
    }
    case Mode::kFixedRow: {
      if (static_cast<Index>(policy.row.size()) != k) {
        throw ShapeError("participation policy: fixed row has " +
                         std::to_string(policy.row.size()) + " entries, adapter has k=" +
                         std::to_string(k));
      }
      Matrix out(n_rows, k);
      for (Index n = 0; n < n_rows; ++n) {
        for (Index j = 0; j < k; ++j) out.at(n, j) = policy.row[static_cast<std::size_t>(j)];
      }
      return out;
    }
  }
  throw Error("participation policy: unknown mode");
}

}  // namespace

Matrix apply_interaction(const Matrix& phi, const Matrix& interaction) {
  if (interaction.rows() != interaction.cols() || interaction.rows() != phi.cols()) {
    throw ShapeError("apply_interaction: phi " + std::to_string(phi.rows()) + "x" +
                     std::to_string(phi.cols()) + " vs interaction " +
                     std::to_string(interaction.rows()) + "x" +
                     std::to_string(interaction.cols()));
  }
  OpCounter scratch;
  return matmul(phi, transpose(interaction), scratch);
}

// ---------------------------------------------------------------------------
// Routers
// ---------------------------------------------------------------------------

LinearSoftmaxRouter::LinearSoftmaxRouter(Index d_in, Index experts, std::uint64_t seed) {
  Rng rng(seed);
  w_ = random_normal(d_in, experts, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
}

RouterOutput LinearSoftmaxRouter::forward(const Matrix& x, OpCounter& counter) {
  x_ = x;
  matmul_into(x, w_, logits_, counter);
  omega_ = softmax_rows(logits_);
  return RouterOutput{omega_, omega_};
}

Matrix LinearSoftmaxRouter::backward(const Matrix& d_omega, std::vector<NamedGrad>& grads) {
  OpCounter scratch;
  const Matrix d_logits = softmax_backward(omega_, d_omega);
  grads.push_back({"router.w", matmul(transpose(x_), d_logits, scratch)});
  return matmul(d_logits, transpose(w_), scratch);
}

void LinearSoftmaxRouter::collect_params(std::vector<ParamRef>& out) {
  out.push_back({"router.w", &w_, true});
}

ShapleyInteractionRouter::ShapleyInteractionRouter(Index d_in, Index hidden, Index experts,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  w1_ = random_normal(d_in, hidden, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  b1_ = Matrix(1, hidden);
  w2_ = random_normal(hidden, experts, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  b2_ = Matrix(1, experts);
  m_ = Matrix(experts, experts);
  for (Index i = 0; i < experts; ++i) {
    for (Index j = 0; j < experts; ++j) {
      m_.at(i, j) = (i == j) ? 1.0 : rng.uniform();
    }
  }
}

RouterOutput ShapleyInteractionRouter::forward(const Matrix& x, OpCounter& counter) {
  x_ = x;
  matmul_into(x, w1_, hidden_out_, counter);
  add_row_in_place(hidden_out_, b1_);
  tanh_in_place(hidden_out_);
  matmul_into(hidden_out_, w2_, pre2_, counter);
  add_row_in_place(pre2_, b2_);
  phi_ = softmax_rows(pre2_);
  matmul_into(phi_, transpose(m_), omega_, counter);
  return RouterOutput{phi_, omega_};
}

Matrix ShapleyInteractionRouter::backward(const Matrix& d_omega,
                                          std::vector<NamedGrad>& grads) {
  OpCounter scratch;
  // omega = phi * M^T  =>  d_phi = d_omega * M, dM = d_omega^T * phi.
  const Matrix d_phi = matmul(d_omega, m_, scratch);
  const Matrix d_m = matmul(transpose(d_omega), phi_, scratch);
  const Matrix d_logits = softmax_backward(phi_, d_phi);
  const Matrix d_w2 = matmul(transpose(hidden_out_), d_logits, scratch);
  const Matrix d_b2 = column_sums(d_logits);
  Matrix d_hidden = matmul(d_logits, transpose(w2_), scratch);
  for (Index i = 0; i < d_hidden.size(); ++i) {
    const double t = hidden_out_.data()[i];
    d_hidden.data()[i] *= (1.0 - t * t);
  }
  const Matrix d_w1 = matmul(transpose(x_), d_hidden, scratch);
  const Matrix d_b1 = column_sums(d_hidden);
  grads.push_back({"router.w1", d_w1});
  grads.push_back({"router.b1", d_b1});
  grads.push_back({"router.w2", d_w2});
  grads.push_back({"router.b2", d_b2});
  grads.push_back({"router.m", d_m});
  return matmul(d_hidden, transpose(w1_), scratch);
}

void ShapleyInteractionRouter::collect_params(std::vector<ParamRef>& out) {
  out.push_back({"router.w1", &w1_, true});
  out.push_back({"router.b1", &b1_, true});
  out.push_back({"router.w2", &w2_, true});
  out.push_back({"router.b2", &b2_, true});
  out.push_back({"router.m", &m_, true});
}

namespace {

std::unique_ptr<Router> make_router(const AdapterConfig& cfg, std::uint64_t seed) {
  if (cfg.router_kind == RouterKind::kLinearSoftmax) {
    return std::make_unique<LinearSoftmaxRouter>(cfg.d_in, cfg.experts, seed);
  }
  return std::make_unique<ShapleyInteractionRouter>(cfg.d_in, cfg.hidden_width(),
                                                    cfg.experts, seed);
}

}  // namespace

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

LoraAdapter::LoraAdapter(const AdapterConfig& config) : cfg_(config) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  a_ = random_normal(cfg_.d_in, cfg_.rank, 1.0 / std::sqrt(static_cast<double>(cfg_.d_in)),
                     rng);
  b_ = Matrix(cfg_.rank, cfg_.d_out);
}

Matrix LoraAdapter::forward(const Matrix& x, OpCounter& counter) {
  require_input_width(x, cfg_.d_in, "lora forward");
  const std::uint64_t calls_before = counter.matmul_calls;
  x_ = x;
  matmul_into(x, a_, z_, counter);
  Matrix out = scale(matmul(z_, b_, counter), cfg_.alpha / static_cast<double>(cfg_.rank));
  last_counts_.branch_matmuls = static_cast<std::int64_t>(counter.matmul_calls - calls_before);
  last_counts_.router_matmuls = 0;
  forward_done_ = true;
  return out;
}

BackwardResult LoraAdapter::backward(const Matrix& upstream) {
  if (!forward_done_) throw Error("lora backward called before forward");
  OpCounter scratch;
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  BackwardResult result;
  result.param_grads.reserve(2);
  const Matrix d_b = scale(matmul(transpose(z_), upstream, scratch), s);
  const Matrix d_z = scale(matmul(upstream, transpose(b_), scratch), s);
  result.param_grads.push_back({"a", matmul(transpose(x_), d_z, scratch)});
  result.param_grads.push_back({"b", d_b});
  result.input_grad = matmul(d_z, transpose(a_), scratch);
  return result;
}

std::vector<ParamRef> LoraAdapter::params() {
  return {{"a", &a_, true}, {"b", &b_, true}};
}

Matrix LoraAdapter::forward_with_policy(const Matrix& x, const ParticipationPolicy&,
                                        OpCounter& counter, RouterOutput* router) {
  // Single branch, nothing to gate.
  require_input_width(x, cfg_.d_in, "lora forward");
  forward_done_ = false;
  matmul_into(x, a_, z_, counter);
  if (router != nullptr) *router = RouterOutput{};
  return scale(matmul(z_, b_, counter), cfg_.alpha / static_cast<double>(cfg_.rank));
}

// ---------------------------------------------------------------------------
// MoELoRA
// ---------------------------------------------------------------------------

MoELoraAdapter::MoELoraAdapter(const AdapterConfig& config) : cfg_(config) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg_.d_in));
  a_.reserve(static_cast<std::size_t>(cfg_.experts));
  b_.reserve(static_cast<std::size_t>(cfg_.experts));
  for (Index i = 0; i < cfg_.experts; ++i) {
    a_.push_back(random_normal(cfg_.d_in, cfg_.rank, stddev, rng));
    b_.push_back(Matrix(cfg_.rank, cfg_.d_out));
  }
  router_ = make_router(cfg_, mix_seed(cfg_.seed, 0x526f7574));
}

std::vector<Matrix> MoELoraAdapter::expert_outputs(const Matrix& x, OpCounter& counter) const {
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  std::vector<Matrix> outs;
  outs.reserve(a_.size());
  for (std::size_t i = 0; i < a_.size(); ++i) {
    Matrix z = matmul(x, a_[i], counter);
    outs.push_back(scale(matmul(z, b_[i], counter), s));
  }
  return outs;
}

Matrix MoELoraAdapter::forward(const Matrix& x, OpCounter& counter) {
  require_input_width(x, cfg_.d_in, "moelora forward");
  x_ = x;
  const std::uint64_t calls0 = counter.matmul_calls;
  router_out_ = router_->forward(x, counter);
  const std::uint64_t calls1 = counter.matmul_calls;

  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  z_.resize(a_.size());
  expert_out_.resize(a_.size());
  Matrix out(x.rows(), cfg_.d_out);
  for (std::size_t i = 0; i < a_.size(); ++i) {
    matmul_into(x, a_[i], z_[i], counter);
    matmul_into(z_[i], b_[i], expert_out_[i], counter);
    scale_in_place(expert_out_[i], s);
    accumulate_weighted(out, expert_out_[i], router_out_.omega, static_cast<Index>(i));
  }
  last_counts_.router_matmuls = static_cast<std::int64_t>(calls1 - calls0);
  last_counts_.branch_matmuls = static_cast<std::int64_t>(counter.matmul_calls - calls1);
  forward_done_ = true;
  return out;
}

BackwardResult MoELoraAdapter::backward(const Matrix& upstream) {
  if (!forward_done_) throw Error("moelora backward called before forward");
  OpCounter scratch;
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  BackwardResult result;
  result.input_grad = Matrix(x_.rows(), cfg_.d_in);

  // d(omega): q[n,i] = <expert_out_i[n,:], upstream[n,:]>.
  Matrix d_omega(x_.rows(), cfg_.experts);
  for (Index i = 0; i < cfg_.experts; ++i) {
    const Matrix dots = row_dots(expert_out_[static_cast<std::size_t>(i)], upstream);
    for (Index n = 0; n < x_.rows(); ++n) d_omega.at(n, i) = dots.at(n, 0);
  }

  const Matrix xt = transpose(x_);
  for (Index i = 0; i < cfg_.experts; ++i) {
    const std::size_t ui = static_cast<std::size_t>(i);
    const Matrix g_i = scale_rows_by_column(upstream, router_out_.omega, i);
    const Matrix d_b = scale(matmul(transpose(z_[ui]), g_i, scratch), s);
    const Matrix d_z = scale(matmul(g_i, transpose(b_[ui]), scratch), s);
    result.param_grads.push_back({"a" + std::to_string(i), matmul(xt, d_z, scratch)});
    result.param_grads.push_back({"b" + std::to_string(i), d_b});
    add_in_place(result.input_grad, matmul(d_z, transpose(a_[ui]), scratch));
  }
  add_in_place(result.input_grad, router_->backward(d_omega, result.param_grads));
  return result;
}

std::vector<ParamRef> MoELoraAdapter::params() {
  std::vector<ParamRef> refs;
  for (Index i = 0; i < cfg_.experts; ++i) {
    refs.push_back({"a" + std::to_string(i), &a_[static_cast<std::size_t>(i)], true});
    refs.push_back({"b" + std::to_string(i), &b_[static_cast<std::size_t>(i)], true});
  }
  router_->collect_params(refs);
  return refs;
}

Matrix MoELoraAdapter::forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                                           OpCounter& counter, RouterOutput* router) {
  require_input_width(x, cfg_.d_in, "moelora forward");
  forward_done_ = false;
  Matrix participation;
  RouterOutput ro;
  if (policy.mode == ParticipationPolicy::Mode::kFixedRow) {
    participation = apply_policy(Matrix(x.rows(), cfg_.experts), policy);
    ro.omega = participation;
  } else {
    ro = router_->forward(x, counter);
    participation = apply_policy(ro.omega, policy);
  }
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  z_.resize(a_.size());
  expert_out_.resize(a_.size());
  Matrix out(x.rows(), cfg_.d_out);
  for (std::size_t i = 0; i < a_.size(); ++i) {
    matmul_into(x, a_[i], z_[i], counter);
    matmul_into(z_[i], b_[i], expert_out_[i], counter);
    scale_in_place(expert_out_[i], s);
    accumulate_weighted(out, expert_out_[i], participation, static_cast<Index>(i));
  }
  if (router != nullptr) *router = std::move(ro);
  return out;
}

// ---------------------------------------------------------------------------
// TeamLoRA
// ---------------------------------------------------------------------------

TeamLoraAdapter::TeamLoraAdapter(const AdapterConfig& config) : cfg_(config) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  a_ = random_normal(cfg_.d_in, cfg_.shared_rank(),
                     1.0 / std::sqrt(static_cast<double>(cfg_.d_in)), rng);
  b_.reserve(static_cast<std::size_t>(cfg_.experts));
  for (Index i = 0; i < cfg_.experts; ++i) {
    b_.push_back(Matrix(cfg_.rank, cfg_.d_out));
  }
  router_ = make_router(cfg_, mix_seed(cfg_.seed, 0x526f7574));
}

std::vector<Matrix> TeamLoraAdapter::collaboration_outputs(const Matrix& x,
                                                           OpCounter& counter) const {
  require_input_width(x, cfg_.d_in, "teamlora collaboration");
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  const Matrix z = matmul(x, a_, counter);
  const std::vector<Matrix> parts = split_columns(z, cfg_.experts);
  std::vector<Matrix> outs;
  outs.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    outs.push_back(scale(matmul(parts[i], b_[i], counter), s));
  }
  return outs;
}

RouterOutput TeamLoraAdapter::competition_weights(const Matrix& x, OpCounter& counter) {
  require_input_width(x, cfg_.d_in, "teamlora competition");
  return router_->forward(x, counter);
}

Matrix TeamLoraAdapter::forward(const Matrix& x, OpCounter& counter) {
  require_input_width(x, cfg_.d_in, "teamlora forward");
  x_ = x;
  const std::uint64_t calls0 = counter.matmul_calls;
  router_out_ = router_->forward(x, counter);
  const std::uint64_t calls1 = counter.matmul_calls;

  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  matmul_into(x, a_, z_, counter);
  split_columns_into(z_, cfg_.experts, z_parts_);
  partial_out_.resize(z_parts_.size());
  Matrix out(x.rows(), cfg_.d_out);
  for (std::size_t i = 0; i < z_parts_.size(); ++i) {
    matmul_into(z_parts_[i], b_[i], partial_out_[i], counter);
    scale_in_place(partial_out_[i], s);
    accumulate_weighted(out, partial_out_[i], router_out_.omega, static_cast<Index>(i));
  }
  last_counts_.router_matmuls = static_cast<std::int64_t>(calls1 - calls0);
  last_counts_.branch_matmuls = static_cast<std::int64_t>(counter.matmul_calls - calls1);
  forward_done_ = true;
  return out;
}

BackwardResult TeamLoraAdapter::backward(const Matrix& upstream) {
  if (!forward_done_) throw Error("teamlora backward called before forward");
  OpCounter scratch;
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  BackwardResult result;

  Matrix d_omega(x_.rows(), cfg_.experts);
  for (Index i = 0; i < cfg_.experts; ++i) {
    const Matrix dots = row_dots(partial_out_[static_cast<std::size_t>(i)], upstream);
    for (Index n = 0; n < x_.rows(); ++n) d_omega.at(n, i) = dots.at(n, 0);
  }

  std::vector<Matrix> d_z_parts;
  d_z_parts.reserve(static_cast<std::size_t>(cfg_.experts));
  std::vector<NamedGrad> b_grads;
  for (Index i = 0; i < cfg_.experts; ++i) {
    const std::size_t ui = static_cast<std::size_t>(i);
    const Matrix g_i = scale_rows_by_column(upstream, router_out_.omega, i);
    b_grads.push_back({"b" + std::to_string(i),
                       scale(matmul(transpose(z_parts_[ui]), g_i, scratch), s)});
    d_z_parts.push_back(scale(matmul(g_i, transpose(b_[ui]), scratch), s));
  }
  const Matrix d_z = concat_columns(d_z_parts);
  result.param_grads.push_back({"a", matmul(transpose(x_), d_z, scratch)});
  for (auto& g : b_grads) result.param_grads.push_back(std::move(g));
  result.input_grad = matmul(d_z, transpose(a_), scratch);
  add_in_place(result.input_grad, router_->backward(d_omega, result.param_grads));
  return result;
}

std::vector<ParamRef> TeamLoraAdapter::params() {
  std::vector<ParamRef> refs;
  refs.push_back({"a", &a_, true});
  for (Index i = 0; i < cfg_.experts; ++i) {
    refs.push_back({"b" + std::to_string(i), &b_[static_cast<std::size_t>(i)], true});
  }
  router_->collect_params(refs);
  return refs;
}

Matrix TeamLoraAdapter::forward_with_policy(const Matrix& x, const ParticipationPolicy& policy,
                                            OpCounter& counter, RouterOutput* router) {
  require_input_width(x, cfg_.d_in, "teamlora forward");
  forward_done_ = false;
  Matrix participation;
  RouterOutput ro;
  if (policy.mode == ParticipationPolicy::Mode::kFixedRow) {
    participation = apply_policy(Matrix(x.rows(), cfg_.experts), policy);
    ro.omega = participation;
  } else {
    ro = router_->forward(x, counter);
    participation = apply_policy(ro.omega, policy);
  }
  const double s = cfg_.alpha / static_cast<double>(cfg_.rank);
  matmul_into(x, a_, z_, counter);
  split_columns_into(z_, cfg_.experts, z_parts_);
  partial_out_.resize(z_parts_.size());
  Matrix out(x.rows(), cfg_.d_out);
  for (std::size_t i = 0; i < z_parts_.size(); ++i) {
    matmul_into(z_parts_[i], b_[i], partial_out_[i], counter);
    scale_in_place(partial_out_[i], s);
    accumulate_weighted(out, partial_out_[i], participation, static_cast<Index>(i));
  }
  if (router != nullptr) *router = std::move(ro);
  return out;
}

// ---------------------------------------------------------------------------
// Factory and accounting
// ---------------------------------------------------------------------------

std::unique_ptr<Adapter> init_adapter(const AdapterConfig& config) {
  config.validate();
  switch (config.kind) {
    case AdapterKind::kLora: return std::make_unique<LoraAdapter>(config);
    case AdapterKind::kMoELora: return std::make_unique<MoELoraAdapter>(config);
    case AdapterKind::kTeamLora: return std::make_unique<TeamLoraAdapter>(config);
  }
  throw ConfigError("init_adapter: unknown adapter kind");
}

ParamCount param_count(const AdapterConfig& config) {
  config.validate();
  ParamCount count;
  const std::int64_t d_in = config.d_in;
  const std::int64_t d_out = config.d_out;
  const std::int64_t r = config.rank;
  const std::int64_t k = config.experts;
  switch (config.kind) {
    case AdapterKind::kLora:
      count.adapter_params = r * (d_in + d_out);
      count.router_params = 0;
      break;
    case AdapterKind::kMoELora:
    case AdapterKind::kTeamLora:
      // Shared-A split and symmetric pairs hold the same A/B budget: the
      // k*r x d_in shared matrix equals k rank-r input maps.
      count.adapter_params = k * r * (d_in + d_out);
      if (config.router_kind == RouterKind::kLinearSoftmax) {
        count.router_params = d_in * k;
      } else {
        const std::int64_t h = config.hidden_width();
        count.router_params = d_in * h + h + h * k + k + k * k;
      }
      break;
  }
  count.total = count.adapter_params + count.router_params;
  return count;
}

MatmulCount matmul_count(const AdapterConfig& config) {
  config.validate();
  MatmulCount count;
  switch (config.kind) {
    case AdapterKind::kLora:
      count.branch_matmuls = 2;
      count.router_matmuls = 0;
      return count;
    case AdapterKind::kMoELora:
      count.branch_matmuls = 2 * config.experts;
      break;
    case AdapterKind::kTeamLora:
      count.branch_matmuls = config.experts + 1;
      break;
  }
  count.router_matmuls = config.router_kind == RouterKind::kLinearSoftmax ? 1 : 3;
  return count;
}

}  // namespace peftlab
