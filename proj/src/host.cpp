// SPDX-License-Identifier: Apache-2.0
#include "peftlab/host.hpp"

#include <cmath>

#include "peftlab/error.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

std::string to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "identity") return Activation::kIdentity;
  throw ConfigError("unknown activation '" + s + "'");
}

FrozenHost::FrozenHost(const std::vector<Index>& dims, std::uint64_t seed,
                       Activation activation)
    : dims_(dims), activation_(activation) {
  if (dims.size() < 2) {
    throw ConfigError("host needs at least 2 dims, got " + std::to_string(dims.size()));
  }
  for (Index d : dims) {
    if (d < 1) throw ConfigError("host dims must be >= 1");
  }
  layers_.resize(dims.size() - 1);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(l)));
    layers_[l].w0 = random_normal(dims[l], dims[l + 1],
                                  1.0 / std::sqrt(static_cast<double>(dims[l])), rng);
    layers_[l].bias = Matrix(1, dims[l + 1]);
  }
}

void FrozenHost::attach_adapter(Index layer, AdapterConfig config) {
  if (layer < 0 || layer >= layer_count()) {
    throw ConfigError("attach_adapter: layer " + std::to_string(layer) +
                      " out of range [0, " + std::to_string(layer_count()) + ")");
  }
  Layer& target = layers_[static_cast<std::size_t>(layer)];
  if (target.adapter) {
    throw ConfigError("attach_adapter: layer " + std::to_string(layer) +
                      " already has an adapter");
  }
  config.d_in = target.w0.rows();
  config.d_out = target.w0.cols();
  target.adapter = init_adapter(config);
}

Adapter* FrozenHost::adapter_at(Index layer) {
  return layers_[static_cast<std::size_t>(layer)].adapter.get();
}

const Adapter* FrozenHost::adapter_at(Index layer) const {
  return layers_[static_cast<std::size_t>(layer)].adapter.get();
}

std::vector<Index> FrozenHost::adapter_layers() const {
  std::vector<Index> out;
  for (Index l = 0; l < layer_count(); ++l) {
    if (layers_[static_cast<std::size_t>(l)].adapter) out.push_back(l);
  }
  return out;
}

std::vector<Index> FrozenHost::multi_expert_layers() const {
  std::vector<Index> out;
  for (Index l = 0; l < layer_count(); ++l) {
    const auto& adapter = layers_[static_cast<std::size_t>(l)].adapter;
    if (adapter && adapter->expert_count() > 1) out.push_back(l);
  }
  return out;
}

Matrix FrozenHost::apply_layers(const Matrix& x, OpCounter& counter, bool cache,
                                ForwardTrace* trace, const ParticipationPolicy* policy) {
  if (x.cols() != input_dim()) {
    throw ShapeError("host forward: input width " + std::to_string(x.cols()) +
                     " != host input dim " + std::to_string(input_dim()));
  }
  if (trace != nullptr) trace->layers.assign(layers_.size(), LayerTrace{});
  Matrix current = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Layer& layer = layers_[l];
    Matrix pre = add_row_broadcast(matmul(current, layer.w0, counter), layer.bias);
    if (layer.adapter) {
      RouterOutput router;
      Matrix branch;
      if (cache) {
        branch = layer.adapter->forward(current, counter);
        router = layer.adapter->router_output();
      } else {
        ParticipationPolicy effective;
        if (policy != nullptr && layer.adapter->expert_count() > 1) effective = *policy;
        branch = layer.adapter->forward_with_policy(current, effective, counter, &router);
      }
      add_in_place(pre, branch);
      if (trace != nullptr) {
        LayerTrace& lt = trace->layers[l];
        lt.has_adapter = true;
        lt.expert_count = layer.adapter->expert_count();
        lt.router = router;
      }
    }
    if (cache) {
      layer.input = current;
      layer.pre_activation = pre;
    }
    current = activation_ == Activation::kRelu ? relu(pre) : pre;
  }
  return current;
}

Matrix FrozenHost::forward(const Matrix& x, OpCounter& counter) {
  Matrix out = apply_layers(x, counter, /*cache=*/true, nullptr, nullptr);
  forward_done_ = true;
  return out;
}

Matrix FrozenHost::eval_forward(const Matrix& x, OpCounter& counter, ForwardTrace* trace,
                                const ParticipationPolicy* policy) {
  forward_done_ = false;
  return apply_layers(x, counter, /*cache=*/false, trace, policy);
}

BackwardResult FrozenHost::backward(const Matrix& upstream) {
  if (!forward_done_) throw Error("host backward called before forward");
  OpCounter scratch;
  BackwardResult result;
  Matrix grad = upstream;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    Layer& layer = layers_[l];
    Matrix d_pre = grad;
    if (activation_ == Activation::kRelu) {
      d_pre = hadamard(d_pre, relu_mask(layer.pre_activation));
    }
    Matrix d_input = matmul(d_pre, transpose(layer.w0), scratch);
    if (layer.adapter) {
      BackwardResult branch = layer.adapter->backward(d_pre);
      add_in_place(d_input, branch.input_grad);
      const std::string prefix = "layer" + std::to_string(l) + ".";
      for (auto& g : branch.param_grads) {
        result.param_grads.push_back({prefix + g.name, std::move(g.grad)});
      }
    }
    grad = std::move(d_input);
  }
  result.input_grad = std::move(grad);
  return result;
}

std::vector<ParamRef> FrozenHost::params() {
  std::vector<ParamRef> refs;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    Layer& layer = layers_[l];
    refs.push_back({prefix + "w0", &layer.w0, false});
    refs.push_back({prefix + "bias", &layer.bias, false});
    if (layer.adapter) {
      for (ParamRef ref : layer.adapter->params()) {
        refs.push_back({prefix + ref.name, ref.value, ref.trainable});
      }
    }
  }
  return refs;
}

std::uint64_t FrozenHost::frozen_checksum() const {
  std::uint64_t h = 0;
  for (const Layer& layer : layers_) {
    h = h * 1099511628211ull + checksum(layer.w0);
    h = h * 1099511628211ull + checksum(layer.bias);
  }
  return h;
}

}  // namespace peftlab
