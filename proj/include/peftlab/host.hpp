// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/diffkit.hpp"
#include "peftlab/matrix.hpp"

namespace peftlab {

enum class Activation { kRelu, kIdentity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Routing state captured per layer during a forward pass; feeds the load and
// redundancy analyses.
struct LayerTrace {
  bool has_adapter = false;
  Index expert_count = 0;
  RouterOutput router;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

// A stack of frozen affine layers with optional adapter injection points.
// W0 and biases never change after construction; only adapter parameters
// are trainable. With every adapter at its zero init the host computes
// exactly what it computed before attachment.
class FrozenHost : public DiffLayer {
 public:
  // dims = [d_0, d_1, ..., d_L]: L layers of shape d_l x d_{l+1}, weights
  // ~ N(0, 1/d_l), zero biases, seeded and deterministic.
  FrozenHost(const std::vector<Index>& dims, std::uint64_t seed,
             Activation activation = Activation::kRelu);

  Index layer_count() const { return static_cast<Index>(layers_.size()); }
  Index input_dim() const { return dims_.front(); }
  Index output_dim() const { return dims_.back(); }
  const std::vector<Index>& dims() const { return dims_; }

  // Instantiates an adapter for the named layer. The config's d_in/d_out are
  // overwritten with the layer shape. Throws on a second attachment or an
  // out-of-range layer.
  void attach_adapter(Index layer, AdapterConfig config);

  Adapter* adapter_at(Index layer);
  const Adapter* adapter_at(Index layer) const;
  std::vector<Index> adapter_layers() const;
  std::vector<Index> multi_expert_layers() const;

  // Training-path forward; caches everything backward needs.
  Matrix forward(const Matrix& x, OpCounter& counter) override;

  // Gradients for adapter parameters only, named "layer<i>.<param>". W0 and
  // biases receive none.
  BackwardResult backward(const Matrix& upstream) override;

  // Adapter parameters (trainable) plus frozen W0/bias refs.
  std::vector<ParamRef> params() override;

  // Evaluation forward: optional trace capture and participation policy
  // (applied to every multi-expert adapter). Leaves no backward cache.
  Matrix eval_forward(const Matrix& x, OpCounter& counter, ForwardTrace* trace = nullptr,
                      const ParticipationPolicy* policy = nullptr);

  // FNV-1a digest over all frozen tensors; invariant across training.
  std::uint64_t frozen_checksum() const;

 private:
  struct Layer {
    Matrix w0;
    Matrix bias;  // 1 x d_out
    std::unique_ptr<Adapter> adapter;
    // backward cache
    Matrix input, pre_activation;
  };

  Matrix apply_layers(const Matrix& x, OpCounter& counter, bool cache, ForwardTrace* trace,
                      const ParticipationPolicy* policy);

  std::vector<Index> dims_;
  Activation activation_;
  std::vector<Layer> layers_;
  bool forward_done_ = false;
};

}  // namespace peftlab
