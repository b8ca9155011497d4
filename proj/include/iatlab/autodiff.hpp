// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-based reverse-mode automatic differentiation over Tensor<Scalar>.
//
// The tape is define-by-run: every forward op appends a node holding its value
// and a backward closure. Nodes are appended in topological order, so backward
// walks the node list once, in reverse.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "iatlab/tensor.hpp"

namespace iat {

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  scale,
  matmul,
  bmm,
  transpose,
  reshape,
  relu,
  gelu,
  exp,
  log,
  sum,
  mean,
  sum_axis,
  mean_axis,
  softmax,
  log_softmax,
  layer_norm,
  grad_reverse,
  split_heads,
  merge_heads,
  gather_tokens,
  scatter_tokens,
  patchify,
  bce_logits,
  cross_entropy,
  masked_mse,
};

const char* to_string(OpKind kind);

using NodeId = std::int32_t;

template <typename Scalar>
class Tape;

/// Handle to a tape node. Cheap to copy; valid while its tape is alive.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  NodeId id = -1;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  Index dim(int axis) const { return value().dim(axis); }
};

template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    // Only meaningful on grad_reverse nodes.
    double grl_lambda = 0.0;
  };

  /// With record=false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  Var<Scalar> variable(Tensor<Scalar> value);

  /// Appends an op node. Throws NumericError if the forward value is not finite.
  Var<Scalar> push(OpKind kind, Tensor<Scalar> value, std::vector<NodeId> parents, BackwardFn backward);

  /// Reverse sweep from a scalar loss; seeds d(loss)/d(loss) = 1.
  void backward(Var<Scalar> loss);

  /// Gradient of a node after backward(); zeros if nothing reached it.
  Tensor<Scalar> grad(Var<Scalar> v) const;

  /// Mutable gradient buffer, allocated on first touch. For backward rules.
  Tensor<Scalar>& grad_ref(NodeId id);

  bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Tensor<Scalar>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

 private:
  std::vector<Node> nodes_;
  bool record_;
};

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops accept b whose shape equals a's or is a trailing
// suffix of it (bias-add broadcast); anything else is a DimensionError.

template <typename Scalar> Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> scale(Var<Scalar> a, Scalar s);

/// [M,K] x [K,N] -> [M,N].
template <typename Scalar> Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);
/// Batched: [N,M,K] x [N,K,P] -> [N,M,P]; with transpose_b, b is [N,P,K].
template <typename Scalar> Var<Scalar> bmm(Var<Scalar> a, Var<Scalar> b, bool transpose_b = false);
template <typename Scalar> Var<Scalar> transpose(Var<Scalar> a);
template <typename Scalar> Var<Scalar> reshape(Var<Scalar> a, Shape shape);

template <typename Scalar> Var<Scalar> relu(Var<Scalar> a);
/// Exact (erf) GELU.
template <typename Scalar> Var<Scalar> gelu(Var<Scalar> a);
template <typename Scalar> Var<Scalar> exp(Var<Scalar> a);
template <typename Scalar> Var<Scalar> log(Var<Scalar> a);

template <typename Scalar> Var<Scalar> sum(Var<Scalar> a);
template <typename Scalar> Var<Scalar> mean(Var<Scalar> a);
template <typename Scalar> Var<Scalar> sum_axis(Var<Scalar> a, int axis);
template <typename Scalar> Var<Scalar> mean_axis(Var<Scalar> a, int axis);

template <typename Scalar> Var<Scalar> softmax(Var<Scalar> a, int axis = -1);
template <typename Scalar> Var<Scalar> log_softmax(Var<Scalar> a);

/// Normalizes over the last axis; gamma and beta have shape [C].
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, double eps = 1e-6);

/// Identity forward; backward multiplies the upstream gradient by -lambda.
template <typename Scalar> Var<Scalar> grad_reverse(Var<Scalar> x, double lambda);

/// [B*T, H*dh] -> [B*H, T, dh].
template <typename Scalar> Var<Scalar> split_heads(Var<Scalar> x, Index batch, Index tokens, Index heads);
/// [B*H, T, dh] -> [B*T, H*dh].
template <typename Scalar> Var<Scalar> merge_heads(Var<Scalar> x, Index batch, Index heads);

/// Selects tokens per sample: x [B,T,E], index holds B*V token ids -> [B,V,E].
template <typename Scalar>
Var<Scalar> gather_tokens(Var<Scalar> x, std::span<const Index> index, Index per_sample);
/// Places visible [B,V,E] at index positions of a [B,T,E] sequence; every
/// other position receives fill [E].
template <typename Scalar>
Var<Scalar> scatter_tokens(Var<Scalar> visible, std::span<const Index> index, Var<Scalar> fill, Index tokens);

/// [B,S,S,C] images -> [B,T,P*P*C] patch tokens (see patch.hpp for layout).
template <typename Scalar> Var<Scalar> patchify(Var<Scalar> images, Index patch);

template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

/// Runs the reverse sweep from a scalar loss and returns d(loss)/d(param) for
/// every named variable. Variables with no path to the loss get zeros.
template <typename Scalar>
GradientMap<Scalar> backward(Var<Scalar> loss, const std::map<std::string, Var<Scalar>>& wrt) {
  for (const auto& [name, v] : wrt) {
    if (v.tape != loss.tape) throw ContractError("backward: parameter '" + name + "' is not on the loss tape");
  }
  loss.tape->backward(loss);
  GradientMap<Scalar> grads;
  for (const auto& [name, v] : wrt) grads.emplace(name, loss.tape->grad(v));
  return grads;
}

template <typename Scalar> Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return mul(a, b); }
template <typename Scalar> Var<Scalar> operator*(Scalar s, Var<Scalar> a) { return scale(a, s); }

}  // namespace iat
