// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "iatlab/patch.hpp"

namespace iat {

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::bmm: return "bmm";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::grad_reverse: return "grad_reverse";
    case OpKind::split_heads: return "split_heads";
    case OpKind::merge_heads: return "merge_heads";
    case OpKind::gather_tokens: return "gather_tokens";
    case OpKind::scatter_tokens: return "scatter_tokens";
    case OpKind::patchify: return "patchify";
    case OpKind::bce_logits: return "bce_logits";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::masked_mse: return "masked_mse";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Tensor<Scalar> value) {
  Var<Scalar> v = constant(std::move(value));
  nodes_.back().requires_grad = record_;
  return v;
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(OpKind kind, Tensor<Scalar> value, std::vector<NodeId> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + to_string(kind) + "'");
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  bool needs = false;
  for (NodeId p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
  n.requires_grad = needs && record_;
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename Scalar>
Tensor<Scalar>& Tape<Scalar>::grad_ref(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
  return n.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
  if (!loss.value().is_scalar()) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor<Scalar>();
  grad_ref(loss.id)[0] = Scalar(1);
  for (NodeId id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::grad(Var<Scalar> v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) return Tensor<Scalar>(n.value.shape());
  return n.grad;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <typename Scalar>
const Tensor<Scalar>& val(Tape<Scalar>& t, NodeId id) {
  return t.value(id);
}

template <typename Scalar>
void check_same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// Broadcast b over a: returns the inner (period) length of b.
template <typename Scalar>
Index broadcast_inner(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " are not trailing-aligned");
  }
  return b.size();
}

// g viewed as [outer, inner]; adds its row sums (sequential order) into out.
template <typename Scalar>
void accumulate_reduced(const Tensor<Scalar>& g, Tensor<Scalar>& out, Scalar sign) {
  const Index inner = out.size();
  const Index outer = g.size() / inner;
  const Scalar* gp = g.data();
  Scalar* op = out.data();
  for (Index r = 0; r < outer; ++r) {
    for (Index j = 0; j < inner; ++j) op[j] += sign * gp[r * inner + j];
  }
}

struct AxisSplit {
  Index outer, axis, inner;
};

template <typename Scalar>
AxisSplit split_axis(const Tensor<Scalar>& a, int& axis) {
  if (axis < 0) axis += a.rank();
  if (axis < 0 || axis >= a.rank()) throw DimensionError("axis out of range for shape " + shape_string(a.shape()));
  AxisSplit s{1, a.dim(axis), 1};
  for (int i = 0; i < axis; ++i) s.outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) s.inner *= a.dim(i);
  return s;
}

template <typename Scalar>
Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out.push_back(shape[static_cast<std::size_t>(i)]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Index inner = broadcast_inner(av, bv, "add");
  Tensor<Scalar> out = av;
  for (Index i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  return a.tape->push(OpKind::add, std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    if (t.requires_grad(pa)) t.grad_ref(pa).array() += g.array();
    if (t.requires_grad(pb)) accumulate_reduced(g, t.grad_ref(pb), Scalar(1));
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Index inner = broadcast_inner(av, bv, "sub");
  Tensor<Scalar> out = av;
  for (Index i = 0; i < out.size(); ++i) out[i] -= bv[i % inner];
  return a.tape->push(OpKind::sub, std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    if (t.requires_grad(pa)) t.grad_ref(pa).array() += g.array();
    if (t.requires_grad(pb)) accumulate_reduced(g, t.grad_ref(pb), Scalar(-1));
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const Index inner = broadcast_inner(av, bv, "mul");
  Tensor<Scalar> out = av;
  for (Index i = 0; i < out.size(); ++i) out[i] *= bv[i % inner];
  return a.tape->push(OpKind::mul, std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id, inner](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.value(pa);
    const auto& bv = t.value(pb);
    if (t.requires_grad(pa)) {
      auto& ga = t.grad_ref(pa);
      for (Index i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % inner];
    }
    if (t.requires_grad(pb)) {
      auto& gb = t.grad_ref(pb);
      for (Index i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * av[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Tensor<Scalar> out = a.value();
  out.array() *= s;
  return a.tape->push(OpKind::scale, std::move(out), {a.id}, [pa = a.id, s](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).array() += s * t.node(self).grad.array();
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor<Scalar> out(Shape{av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  return a.tape->push(OpKind::matmul, std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    if (t.requires_grad(pa)) t.grad_ref(pa).matrix().noalias() += g.matrix() * t.value(pb).matrix().transpose();
    if (t.requires_grad(pb)) t.grad_ref(pb).matrix().noalias() += t.value(pa).matrix().transpose() * g.matrix();
  });
}

template <typename Scalar>
Var<Scalar> bmm(Var<Scalar> a, Var<Scalar> b, bool transpose_b) {
  check_same_tape(a, b);
  using Mat = typename Tensor<Scalar>::MatrixType;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw DimensionError("bmm: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  const Index n = av.dim(0), m = av.dim(1), k = av.dim(2);
  const Index bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const Index p = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) throw DimensionError("bmm inner dims: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor<Scalar> out(Shape{n, m, p});
  for (Index i = 0; i < n; ++i) {
    CMap ai(av.data() + i * m * k, m, k);
    Map oi(out.data() + i * m * p, m, p);
    if (transpose_b) {
      oi.noalias() = ai * CMap(bv.data() + i * p * k, p, k).transpose();
    } else {
      oi.noalias() = ai * CMap(bv.data() + i * k * p, k, p);
    }
  }
  return a.tape->push(OpKind::bmm, std::move(out), {a.id, b.id},
                      [pa = a.id, pb = b.id, n, m, k, p, transpose_b](Tape<Scalar>& t, NodeId self) {
                        const auto& g = t.node(self).grad;
                        const auto& av = t.value(pa);
                        const auto& bv = t.value(pb);
                        const bool need_a = t.requires_grad(pa);
                        const bool need_b = t.requires_grad(pb);
                        Scalar* ga = need_a ? t.grad_ref(pa).data() : nullptr;
                        Scalar* gb = need_b ? t.grad_ref(pb).data() : nullptr;
                        for (Index i = 0; i < n; ++i) {
                          CMap gi(g.data() + i * m * p, m, p);
                          CMap ai(av.data() + i * m * k, m, k);
                          if (transpose_b) {
                            CMap bi(bv.data() + i * p * k, p, k);
                            if (need_a) Map(ga + i * m * k, m, k).noalias() += gi * bi;
                            if (need_b) Map(gb + i * p * k, p, k).noalias() += gi.transpose() * ai;
                          } else {
                            CMap bi(bv.data() + i * k * p, k, p);
                            if (need_a) Map(ga + i * m * k, m, k).noalias() += gi * bi.transpose();
                            if (need_b) Map(gb + i * k * p, k, p).noalias() += ai.transpose() * gi;
                          }
                        }
                      });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
  const auto& av = a.value();
  if (av.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_string(av.shape()));
  Tensor<Scalar> out(Shape{av.dim(1), av.dim(0)});
  out.matrix() = av.matrix().transpose();
  return a.tape->push(OpKind::transpose, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).matrix() += t.node(self).grad.matrix().transpose();
  });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return a.tape->push(OpKind::reshape, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).array() += t.node(self).grad.array();
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tensor<Scalar> out = a.value();
  for (auto& v : out.values()) v = v > Scalar(0) ? v : Scalar(0);
  return a.tape->push(OpKind::relu, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    const auto& x = t.value(pa);
    auto& gx = t.grad_ref(pa);
    for (Index i = 0; i < g.size(); ++i) {
      if (x[i] > Scalar(0)) gx[i] += g[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Tensor<Scalar> out = a.value();
  for (auto& v : out.values()) v = Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  return a.tape->push(OpKind::gelu, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
    constexpr Scalar inv_sqrt2pi = std::numbers::inv_sqrtpi_v<Scalar> * inv_sqrt2;
    const auto& g = t.node(self).grad;
    const auto& x = t.value(pa);
    auto& gx = t.grad_ref(pa);
    for (Index i = 0; i < g.size(); ++i) {
      const Scalar xi = x[i];
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(xi * inv_sqrt2));
      const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * xi * xi);
      gx[i] += g[i] * (cdf + xi * pdf);
    }
  });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  Tensor<Scalar> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape->push(OpKind::exp, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    const auto& n = t.node(self);
    t.grad_ref(pa).array() += n.grad.array() * n.value.array();
  });
}

template <typename Scalar>
Var<Scalar> log(Var<Scalar> a) {
  Tensor<Scalar> out = a.value();
  for (auto& v : out.values()) v = std::log(v);
  return a.tape->push(OpKind::log, std::move(out), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).array() += t.node(self).grad.array() / t.value(pa).array();
  });
}

// ---------------------------------------------------------------------------
// Reductions (sequential row-major order)

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Scalar s = 0;
  for (Scalar v : a.value().values()) s += v;
  return a.tape->push(OpKind::sum, Tensor<Scalar>::scalar(s), {a.id}, [pa = a.id](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).array() += t.node(self).grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  Scalar s = 0;
  for (Scalar v : a.value().values()) s += v;
  const Scalar n = static_cast<Scalar>(a.value().size());
  return a.tape->push(OpKind::mean, Tensor<Scalar>::scalar(s / n), {a.id}, [pa = a.id, n](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pa).array() += t.node(self).grad[0] / n;
  });
}

namespace {

template <typename Scalar>
Var<Scalar> reduce_axis(Var<Scalar> a, int axis, bool average, OpKind kind) {
  const auto& av = a.value();
  const AxisSplit s = split_axis(av, axis);
  Tensor<Scalar> out(drop_axis<Scalar>(av.shape(), axis));
  const Scalar factor = average ? Scalar(1) / static_cast<Scalar>(s.axis) : Scalar(1);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index k = 0; k < s.axis; ++k) {
      for (Index i = 0; i < s.inner; ++i) out[o * s.inner + i] += av[(o * s.axis + k) * s.inner + i];
    }
  }
  if (average) out.array() *= factor;
  return a.tape->push(kind, std::move(out), {a.id}, [pa = a.id, s, factor](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad_ref(pa);
    for (Index o = 0; o < s.outer; ++o) {
      for (Index k = 0; k < s.axis; ++k) {
        for (Index i = 0; i < s.inner; ++i) ga[(o * s.axis + k) * s.inner + i] += factor * g[o * s.inner + i];
      }
    }
  });
}

}  // namespace

template <typename Scalar>
Var<Scalar> sum_axis(Var<Scalar> a, int axis) {
  return reduce_axis(a, axis, false, OpKind::sum_axis);
}

template <typename Scalar>
Var<Scalar> mean_axis(Var<Scalar> a, int axis) {
  return reduce_axis(a, axis, true, OpKind::mean_axis);
}

// ---------------------------------------------------------------------------
// Softmax family

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a, int axis) {
  const auto& av = a.value();
  const AxisSplit s = split_axis(av, axis);
  Tensor<Scalar> out(av.shape());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.axis * s.inner + i;
      Scalar mx = av[base];
      for (Index k = 1; k < s.axis; ++k) mx = std::max(mx, av[base + k * s.inner]);
      Scalar z = 0;
      for (Index k = 0; k < s.axis; ++k) {
        const Scalar e = std::exp(av[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (Index k = 0; k < s.axis; ++k) out[base + k * s.inner] /= z;
    }
  }
  return a.tape->push(OpKind::softmax, std::move(out), {a.id}, [pa = a.id, s](Tape<Scalar>& t, NodeId self) {
    const auto& n = t.node(self);
    const auto& g = n.grad;
    const auto& y = n.value;
    auto& ga = t.grad_ref(pa);
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.axis * s.inner + i;
        Scalar dot = 0;
        for (Index k = 0; k < s.axis; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (Index k = 0; k < s.axis; ++k) {
          const Index j = base + k * s.inner;
          ga[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> log_softmax(Var<Scalar> a) {
  const auto& av = a.value();
  const Index c = av.cols();
  const Index rows = av.rows();
  Tensor<Scalar> out(av.shape());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* x = av.data() + r * c;
    Scalar mx = x[0];
    for (Index k = 1; k < c; ++k) mx = std::max(mx, x[k]);
    Scalar z = 0;
    for (Index k = 0; k < c; ++k) z += std::exp(x[k] - mx);
    const Scalar lse = mx + std::log(z);
    for (Index k = 0; k < c; ++k) out[r * c + k] = x[k] - lse;
  }
  return a.tape->push(OpKind::log_softmax, std::move(out), {a.id}, [pa = a.id, rows, c](Tape<Scalar>& t, NodeId self) {
    const auto& n = t.node(self);
    auto& ga = t.grad_ref(pa);
    for (Index r = 0; r < rows; ++r) {
      Scalar gs = 0;
      for (Index k = 0; k < c; ++k) gs += n.grad[r * c + k];
      for (Index k = 0; k < c; ++k) ga[r * c + k] += n.grad[r * c + k] - std::exp(n.value[r * c + k]) * gs;
    }
  });
}

// ---------------------------------------------------------------------------
// Layer normalization

template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const auto& xv = x.value();
  const Index c = xv.cols();
  const Index rows = xv.rows();
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(c) + "]");
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<Scalar> out(xv.shape());
  // Saved per-row normalized values and reciprocal std for backward.
  auto xhat = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(xv.size()));
  auto rstd = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const Scalar* xr = xv.data() + r * c;
    Scalar mu = 0;
    for (Index k = 0; k < c; ++k) mu += xr[k];
    mu /= static_cast<Scalar>(c);
    Scalar var = 0;
    for (Index k = 0; k < c; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= static_cast<Scalar>(c);
    const Scalar rs = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (Index k = 0; k < c; ++k) {
      const Scalar h = (xr[k] - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r * c + k)] = h;
      out[r * c + k] = h * gv[k] + bv[k];
    }
  }
  return x.tape->push(
      OpKind::layer_norm, std::move(out), {x.id, gamma.id, beta.id},
      [px = x.id, pg = gamma.id, pb = beta.id, xhat, rstd, rows, c](Tape<Scalar>& t, NodeId self) {
        const auto& g = t.node(self).grad;
        const auto& gv = t.value(pg);
        if (t.requires_grad(pg)) {
          auto& gg = t.grad_ref(pg);
          for (Index r = 0; r < rows; ++r)
            for (Index k = 0; k < c; ++k) gg[k] += g[r * c + k] * (*xhat)[static_cast<std::size_t>(r * c + k)];
        }
        if (t.requires_grad(pb)) accumulate_reduced(g, t.grad_ref(pb), Scalar(1));
        if (t.requires_grad(px)) {
          auto& gx = t.grad_ref(px);
          const Scalar inv_c = Scalar(1) / static_cast<Scalar>(c);
          for (Index r = 0; r < rows; ++r) {
            Scalar mean_d = 0, mean_dh = 0;
            for (Index k = 0; k < c; ++k) {
              const Scalar d = g[r * c + k] * gv[k];
              mean_d += d;
              mean_dh += d * (*xhat)[static_cast<std::size_t>(r * c + k)];
            }
            mean_d *= inv_c;
            mean_dh *= inv_c;
            const Scalar rs = (*rstd)[static_cast<std::size_t>(r)];
            for (Index k = 0; k < c; ++k) {
              const Scalar d = g[r * c + k] * gv[k];
              gx[r * c + k] += rs * (d - mean_d - (*xhat)[static_cast<std::size_t>(r * c + k)] * mean_dh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient reversal

template <typename Scalar>
Var<Scalar> grad_reverse(Var<Scalar> x, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("grad_reverse: lambda must be a finite non-negative number, got " + std::to_string(lambda));
  }
  Var<Scalar> out = x.tape->push(OpKind::grad_reverse, x.value(), {x.id}, [px = x.id, lambda](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(px).array() += static_cast<Scalar>(-lambda) * t.node(self).grad.array();
  });
  out.tape->node(out.id).grl_lambda = lambda;
  return out;
}

// ---------------------------------------------------------------------------
// Attention layout

template <typename Scalar>
Var<Scalar> split_heads(Var<Scalar> x, Index batch, Index tokens, Index heads) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != batch * tokens || xv.dim(1) % heads != 0) {
    throw DimensionError("split_heads: bad input " + shape_string(xv.shape()));
  }
  const Index dh = xv.dim(1) / heads;
  Tensor<Scalar> out(Shape{batch * heads, tokens, dh});
  auto index = [=](Index b, Index h, Index t, Index d) {
    return std::pair{((b * heads + h) * tokens + t) * dh + d, (b * tokens + t) * heads * dh + h * dh + d};
  };
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < tokens; ++t)
        for (Index d = 0; d < dh; ++d) {
          auto [o, i] = index(b, h, t, d);
          out[o] = xv[i];
        }
  return x.tape->push(OpKind::split_heads, std::move(out), {x.id}, [px = x.id, batch, heads, tokens, dh, index](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_ref(px);
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < heads; ++h)
        for (Index tk = 0; tk < tokens; ++tk)
          for (Index d = 0; d < dh; ++d) {
            auto [o, i] = index(b, h, tk, d);
            gx[i] += g[o];
          }
  });
}

template <typename Scalar>
Var<Scalar> merge_heads(Var<Scalar> x, Index batch, Index heads) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || xv.dim(0) != batch * heads) {
    throw DimensionError("merge_heads: bad input " + shape_string(xv.shape()));
  }
  const Index tokens = xv.dim(1), dh = xv.dim(2);
  Tensor<Scalar> out(Shape{batch * tokens, heads * dh});
  auto index = [=](Index b, Index h, Index t, Index d) {
    return std::pair{((b * heads + h) * tokens + t) * dh + d, (b * tokens + t) * heads * dh + h * dh + d};
  };
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < tokens; ++t)
        for (Index d = 0; d < dh; ++d) {
          auto [i, o] = index(b, h, t, d);
          out[o] = xv[i];
        }
  return x.tape->push(OpKind::merge_heads, std::move(out), {x.id}, [px = x.id, batch, heads, tokens, dh, index](Tape<Scalar>& t, NodeId self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_ref(px);
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < heads; ++h)
        for (Index tk = 0; tk < tokens; ++tk)
          for (Index d = 0; d < dh; ++d) {
            auto [i, o] = index(b, h, tk, d);
            gx[i] += g[o];
          }
  });
}

// ---------------------------------------------------------------------------
// Token selection (masked autoencoding)

template <typename Scalar>
Var<Scalar> gather_tokens(Var<Scalar> x, std::span<const Index> index, Index per_sample) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || per_sample <= 0 || static_cast<Index>(index.size()) != xv.dim(0) * per_sample) {
    throw DimensionError("gather_tokens: bad input " + shape_string(xv.shape()));
  }
  const Index batch = xv.dim(0), tokens = xv.dim(1), e = xv.dim(2);
  std::vector<Index> idx(index.begin(), index.end());
  for (Index v : idx) {
    if (v < 0 || v >= tokens) throw DimensionError("gather_tokens: token index out of range");
  }
  Tensor<Scalar> out(Shape{batch, per_sample, e});
  for (Index b = 0; b < batch; ++b)
    for (Index j = 0; j < per_sample; ++j) {
      const Index src = (b * tokens + idx[static_cast<std::size_t>(b * per_sample + j)]) * e;
      std::copy_n(xv.data() + src, e, out.data() + (b * per_sample + j) * e);
    }
  return x.tape->push(OpKind::gather_tokens, std::move(out), {x.id},
                      [px = x.id, idx = std::move(idx), batch, tokens, per_sample, e](Tape<Scalar>& t, NodeId self) {
                        const auto& g = t.node(self).grad;
                        auto& gx = t.grad_ref(px);
                        for (Index b = 0; b < batch; ++b)
                          for (Index j = 0; j < per_sample; ++j) {
                            const Index dst = (b * tokens + idx[static_cast<std::size_t>(b * per_sample + j)]) * e;
                            for (Index k = 0; k < e; ++k) gx[dst + k] += g[(b * per_sample + j) * e + k];
                          }
                      });
}

template <typename Scalar>
Var<Scalar> scatter_tokens(Var<Scalar> visible, std::span<const Index> index, Var<Scalar> fill, Index tokens) {
  check_same_tape(visible, fill);
  const auto& vv = visible.value();
  const auto& fv = fill.value();
  if (vv.rank() != 3 || static_cast<Index>(index.size()) != vv.dim(0) * vv.dim(1) || fv.shape() != Shape{vv.dim(2)}) {
    throw DimensionError("scatter_tokens: bad input " + shape_string(vv.shape()));
  }
  const Index batch = vv.dim(0), per_sample = vv.dim(1), e = vv.dim(2);
  // source[b*T + t] = row of visible feeding position t, or -1 for fill.
  std::vector<Index> source(static_cast<std::size_t>(batch * tokens), -1);
  for (Index b = 0; b < batch; ++b)
    for (Index j = 0; j < per_sample; ++j) {
      const Index pos = index[static_cast<std::size_t>(b * per_sample + j)];
      if (pos < 0 || pos >= tokens) throw DimensionError("scatter_tokens: token index out of range");
      auto& slot = source[static_cast<std::size_t>(b * tokens + pos)];
      if (slot != -1) throw DimensionError("scatter_tokens: duplicate token index");
      slot = b * per_sample + j;
    }
  Tensor<Scalar> out(Shape{batch, tokens, e});
  for (Index r = 0; r < batch * tokens; ++r) {
    const Index s = source[static_cast<std::size_t>(r)];
    const Scalar* src = s >= 0 ? vv.data() + s * e : fv.data();
    std::copy_n(src, e, out.data() + r * e);
  }
  return visible.tape->push(OpKind::scatter_tokens, std::move(out), {visible.id, fill.id},
                            [pv = visible.id, pf = fill.id, source = std::move(source), e](Tape<Scalar>& t, NodeId self) {
                              const auto& g = t.node(self).grad;
                              const bool need_v = t.requires_grad(pv);
                              const bool need_f = t.requires_grad(pf);
                              Scalar* gv = need_v ? t.grad_ref(pv).data() : nullptr;
                              Scalar* gf = need_f ? t.grad_ref(pf).data() : nullptr;
                              for (std::size_t r = 0; r < source.size(); ++r) {
                                const Index s = source[r];
                                const Scalar* gr = g.data() + static_cast<Index>(r) * e;
                                if (s >= 0) {
                                  if (need_v)
                                    for (Index k = 0; k < e; ++k) gv[s * e + k] += gr[k];
                                } else if (need_f) {
                                  for (Index k = 0; k < e; ++k) gf[k] += gr[k];
                                }
                              }
                            });
}

template <typename Scalar>
Var<Scalar> patchify(Var<Scalar> images, Index patch) {
  const Index channels = images.value().rank() == 4 ? images.value().dim(3) : 0;
  Tensor<Scalar> out = patchify(images.value(), patch);
  return images.tape->push(OpKind::patchify, std::move(out), {images.id}, [pi = images.id, patch, channels](Tape<Scalar>& t, NodeId self) {
    t.grad_ref(pi).array() += unpatchify(t.node(self).grad, patch, channels).array();
  });
}

// ---------------------------------------------------------------------------

#define IAT_INSTANTIATE_OPS(S)                                                              \
  template Var<S> add(Var<S>, Var<S>);                                                      \
  template Var<S> sub(Var<S>, Var<S>);                                                      \
  template Var<S> mul(Var<S>, Var<S>);                                                      \
  template Var<S> scale(Var<S>, S);                                                         \
  template Var<S> matmul(Var<S>, Var<S>);                                                   \
  template Var<S> bmm(Var<S>, Var<S>, bool);                                                \
  template Var<S> transpose(Var<S>);                                                        \
  template Var<S> reshape(Var<S>, Shape);                                                   \
  template Var<S> relu(Var<S>);                                                             \
  template Var<S> gelu(Var<S>);                                                             \
  template Var<S> exp(Var<S>);                                                              \
  template Var<S> log(Var<S>);                                                              \
  template Var<S> sum(Var<S>);                                                              \
  template Var<S> mean(Var<S>);                                                             \
  template Var<S> sum_axis(Var<S>, int);                                                    \
  template Var<S> mean_axis(Var<S>, int);                                                   \
  template Var<S> softmax(Var<S>, int);                                                     \
  template Var<S> log_softmax(Var<S>);                                                      \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, double);                               \
  template Var<S> grad_reverse(Var<S>, double);                                             \
  template Var<S> split_heads(Var<S>, Index, Index, Index);                                 \
  template Var<S> merge_heads(Var<S>, Index, Index);                                        \
  template Var<S> gather_tokens(Var<S>, std::span<const Index>, Index);                     \
  template Var<S> scatter_tokens(Var<S>, std::span<const Index>, Var<S>, Index);            \
  template Var<S> patchify(Var<S>, Index);

IAT_INSTANTIATE_OPS(float)
IAT_INSTANTIATE_OPS(double)

#undef IAT_INSTANTIATE_OPS

}  // namespace iat
