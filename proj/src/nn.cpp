// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

namespace iat {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::task_head: return "task_head";
    case ParamGroup::id_head: return "id_head";
    case ParamGroup::decoder: return "decoder";
  }
  return "unknown";
}

ParamGroup group_of(std::string_view name) {
  for (ParamGroup g : {ParamGroup::backbone, ParamGroup::task_head, ParamGroup::id_head, ParamGroup::decoder}) {
    const std::string prefix = std::string(to_string(g)) + ".";
    if (name.substr(0, prefix.size()) == prefix) return g;
  }
  throw ConfigError("parameter name '" + std::string(name) + "' has no group prefix");
}

// ---------------------------------------------------------------------------
// ModelParams

template <typename Scalar>
void ModelParams<Scalar>::add(const std::string& name, Tensor<Scalar> value, bool decay) {
  group_of(name);
  entries_[name] = Entry{std::move(value), decay};
}

template <typename Scalar>
const typename ModelParams<Scalar>::Entry& ModelParams<Scalar>::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) {
  return const_cast<Entry&>(entry(name)).value;
}

template <typename Scalar>
const Tensor<Scalar>& ModelParams<Scalar>::at(const std::string& name) const {
  return entry(name).value;
}

template <typename Scalar>
std::vector<std::string> ModelParams<Scalar>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

template <typename Scalar>
std::vector<std::string> ModelParams<Scalar>::names(ParamGroup group) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (group_of(name) == group) out.push_back(name);
  }
  return out;
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::subset(std::initializer_list<ParamGroup> groups) const {
  ModelParams out;
  for (const auto& [name, e] : entries_) {
    if (std::find(groups.begin(), groups.end(), group_of(name)) != groups.end()) out.entries_[name] = e;
  }
  return out;
}

template <typename Scalar>
void ModelParams<Scalar>::erase_group(ParamGroup group) {
  std::erase_if(entries_, [group](const auto& kv) { return group_of(kv.first) == group; });
}

template <typename Scalar>
void ModelParams<Scalar>::merge(const ModelParams& other) {
  for (const auto& [name, e] : other.entries_) entries_[name] = e;
}

template <typename Scalar>
Index ModelParams<Scalar>::count() const {
  Index n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

template <typename Scalar>
bool ModelParams<Scalar>::operator==(const ModelParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, e] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end() || !(it->second.value == e.value) || it->second.decay != e.decay) return false;
  }
  return true;
}

template class ModelParams<float>;
template class ModelParams<double>;

// ---------------------------------------------------------------------------
// Bound

template <typename Scalar>
Bound<Scalar>::Bound(Tape<Scalar>& tape, const ModelParams<Scalar>& params, std::initializer_list<ParamGroup> frozen)
    : tape_(&tape) {
  for (const auto& [name, e] : params.entries()) {
    const bool is_frozen = std::find(frozen.begin(), frozen.end(), group_of(name)) != frozen.end();
    Var<Scalar> v = is_frozen ? tape.constant(e.value) : tape.variable(e.value);
    vars_.emplace(name, v);
    if (!is_frozen) trainable_.emplace(name, v);
  }
}

template <typename Scalar>
Var<Scalar> Bound<Scalar>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("parameter '" + name + "' is not bound");
  return it->second;
}

template class Bound<float>;
template class Bound<double>;

// ---------------------------------------------------------------------------
// Configs and init

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || depth < 0 || n_heads <= 0 ||
      mlp_ratio <= 0) {
    throw ConfigError("backbone config values must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim % n_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

void DecoderConfig::validate() const {
  if (embed_dim <= 0 || depth < 0 || n_heads <= 0 || mlp_ratio <= 0) throw ConfigError("decoder config values must be positive");
  if (embed_dim % n_heads != 0) throw ConfigError("decoder embed_dim is not divisible by n_heads");
}

namespace {

template <typename Scalar>
Tensor<Scalar> trunc_normal(Shape shape, Rng& rng, double std = 0.02) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.truncated_normal(std));
  return t;
}

template <typename Scalar>
void add_linear(ModelParams<Scalar>& params, const std::string& prefix, Index in, Index out, Rng& rng) {
  params.add(prefix + ".w", trunc_normal<Scalar>({in, out}, rng), true);
  params.add(prefix + ".b", Tensor<Scalar>(Shape{out}), false);
}

template <typename Scalar>
void add_norm(ModelParams<Scalar>& params, const std::string& prefix, Index dim) {
  params.add(prefix + ".g", Tensor<Scalar>(Shape{dim}, Scalar(1)), false);
  params.add(prefix + ".b", Tensor<Scalar>(Shape{dim}), false);
}

template <typename Scalar>
void add_block(ModelParams<Scalar>& params, const std::string& prefix, Index dim, Index mlp_ratio, Rng& rng) {
  add_norm(params, prefix + ".ln1", dim);
  for (const char* m : {"q", "k", "v", "o"}) add_linear(params, prefix + ".attn." + m, dim, dim, rng);
  add_norm(params, prefix + ".ln2", dim);
  add_linear(params, prefix + ".mlp.fc1", dim, dim * mlp_ratio, rng);
  add_linear(params, prefix + ".mlp.fc2", dim * mlp_ratio, dim, rng);
}

}  // namespace

template <typename Scalar>
void init_backbone(ModelParams<Scalar>& params, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  add_linear(params, "backbone.patch_embed", cfg.patch_dim(), cfg.embed_dim, rng);
  params.add("backbone.pos_embed", trunc_normal<Scalar>({cfg.tokens(), cfg.embed_dim}, rng), false);
  for (Index i = 0; i < cfg.depth; ++i) {
    add_block(params, "backbone.blocks." + std::to_string(i), cfg.embed_dim, cfg.mlp_ratio, rng);
  }
  add_norm(params, "backbone.norm", cfg.embed_dim);
}

template <typename Scalar>
void init_task_head(ModelParams<Scalar>& params, Index dim, Index n_au, Rng& rng) {
  if (n_au <= 0) throw ConfigError("task head needs at least one output");
  add_linear(params, "task_head", dim, n_au, rng);
}

template <typename Scalar>
void init_id_head(ModelParams<Scalar>& params, Index dim, Index n_subjects, int depth, Rng& rng) {
  if (depth < 1 || depth > 3) throw ConfigError("id head depth must be 1, 2 or 3, got " + std::to_string(depth));
  if (n_subjects <= 0) throw ConfigError("id head needs at least one subject");
  for (int j = 0; j < depth; ++j) {
    add_linear(params, "id_head." + std::to_string(j), dim, j + 1 == depth ? n_subjects : dim, rng);
  }
}

template <typename Scalar>
void init_decoder(ModelParams<Scalar>& params, const BackboneConfig& enc, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  add_linear(params, "decoder.embed", enc.embed_dim, cfg.embed_dim, rng);
  params.add("decoder.mask_token", trunc_normal<Scalar>({cfg.embed_dim}, rng), false);
  params.add("decoder.pos_embed", trunc_normal<Scalar>({enc.tokens(), cfg.embed_dim}, rng), false);
  for (Index i = 0; i < cfg.depth; ++i) {
    add_block(params, "decoder.blocks." + std::to_string(i), cfg.embed_dim, cfg.mlp_ratio, rng);
  }
  add_norm(params, "decoder.norm", cfg.embed_dim);
  add_linear(params, "decoder.pred", cfg.embed_dim, enc.patch_dim(), rng);
}

template <typename Scalar>
int id_head_depth(const ModelParams<Scalar>& params) {
  int depth = 0;
  while (params.contains("id_head." + std::to_string(depth) + ".w")) ++depth;
  return depth;
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
Var<Scalar> linear(const Bound<Scalar>& p, const std::string& prefix, Var<Scalar> x) {
  return matmul(x, p[prefix + ".w"]) + p[prefix + ".b"];
}

namespace {

template <typename Scalar>
Var<Scalar> norm(const Bound<Scalar>& p, const std::string& prefix, Var<Scalar> x, double eps) {
  return layer_norm(x, p[prefix + ".g"], p[prefix + ".b"], eps);
}

}  // namespace

template <typename Scalar>
Var<Scalar> transformer_block(const Bound<Scalar>& p, const std::string& prefix, Var<Scalar> x, Index batch,
                              Index tokens, Index heads) {
  constexpr double eps = 1e-6;
  const Index dim = x.dim(1);
  const Index head_dim = dim / heads;
  const Var<Scalar> h = norm(p, prefix + ".ln1", x, eps);
  const Var<Scalar> q = split_heads(linear(p, prefix + ".attn.q", h), batch, tokens, heads);
  const Var<Scalar> k = split_heads(linear(p, prefix + ".attn.k", h), batch, tokens, heads);
  const Var<Scalar> v = split_heads(linear(p, prefix + ".attn.v", h), batch, tokens, heads);
  const auto inv_sqrt = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Var<Scalar> attn = softmax(scale(bmm(q, k, true), inv_sqrt), -1);
  const Var<Scalar> ctx = merge_heads(bmm(attn, v), batch, heads);
  x = x + linear(p, prefix + ".attn.o", ctx);
  const Var<Scalar> h2 = norm(p, prefix + ".ln2", x, eps);
  return x + linear(p, prefix + ".mlp.fc2", gelu(linear(p, prefix + ".mlp.fc1", h2)));
}

template <typename Scalar>
Var<Scalar> embed_patches(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images) {
  cfg.validate();
  const auto& shape = images.shape();
  if (shape.size() != 4 || shape[1] != cfg.image_size || shape[2] != cfg.image_size || shape[3] != cfg.channels) {
    throw DimensionError("backbone expects [B," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.channels) + "], got " +
                         shape_string(shape));
  }
  const Index batch = shape[0];
  Var<Scalar> tokens = reshape(patchify(images, cfg.patch_size), {batch * cfg.tokens(), cfg.patch_dim()});
  tokens = reshape(linear(p, "backbone.patch_embed", tokens), {batch, cfg.tokens(), cfg.embed_dim});
  return tokens + p["backbone.pos_embed"];
}

template <typename Scalar>
Var<Scalar> encode_tokens(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> tokens) {
  const Index batch = tokens.dim(0);
  const Index n = tokens.dim(1);
  Var<Scalar> x = reshape(tokens, {batch * n, cfg.embed_dim});
  for (Index i = 0; i < cfg.depth; ++i) {
    x = transformer_block(p, "backbone.blocks." + std::to_string(i), x, batch, n, cfg.n_heads);
  }
  x = layer_norm(x, p["backbone.norm.g"], p["backbone.norm.b"], cfg.ln_eps);
  return reshape(x, {batch, n, cfg.embed_dim});
}

template <typename Scalar>
Var<Scalar> backbone_forward(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images) {
  return mean_axis(encode_tokens(p, cfg, embed_patches(p, cfg, images)), 1);
}

template <typename Scalar>
Var<Scalar> task_head_forward(const Bound<Scalar>& p, Var<Scalar> features) {
  if (features.value().rank() != 2) throw DimensionError("task head expects [B,D] features");
  return linear(p, "task_head", features);
}

template <typename Scalar>
Var<Scalar> id_head_forward(const Bound<Scalar>& p, Var<Scalar> features, int depth) {
  if (depth < 1 || depth > 3) throw ConfigError("id head depth must be 1, 2 or 3, got " + std::to_string(depth));
  if (features.value().rank() != 2) throw DimensionError("id head expects [B,D] features");
  Var<Scalar> x = features;
  for (int j = 0; j < depth; ++j) {
    x = linear(p, "id_head." + std::to_string(j), x);
    if (j + 1 < depth) x = relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Losses

template <typename Scalar>
Var<Scalar> bce_multilabel(Var<Scalar> logits, const Tensor<Scalar>& targets) {
  const auto& z = logits.value();
  if (z.shape() != targets.shape()) {
    throw DimensionError("bce: logits " + shape_string(z.shape()) + " vs targets " + shape_string(targets.shape()));
  }
  for (Scalar t : targets.values()) {
    if (t != Scalar(0) && t != Scalar(1)) throw DataError("bce: targets must be binary");
  }
  const auto n = static_cast<Scalar>(z.size());
  Scalar total = 0;
  for (Index i = 0; i < z.size(); ++i) {
    const Scalar zi = z[i];
    total += std::max(zi, Scalar(0)) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  return logits.tape->push(OpKind::bce_logits, Tensor<Scalar>::scalar(total / n), {logits.id},
                           [pz = logits.id, targets, n](Tape<Scalar>& t, NodeId self) {
                             const Scalar g = t.node(self).grad[0];
                             const auto& z = t.value(pz);
                             auto& gz = t.grad_ref(pz);
                             for (Index i = 0; i < z.size(); ++i) {
                               const Scalar sig = Scalar(1) / (Scalar(1) + std::exp(-z[i]));
                               gz[i] += g * (sig - targets[i]) / n;
                             }
                           });
}

template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> labels) {
  const auto& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != static_cast<Index>(labels.size())) {
    throw DimensionError("cross_entropy: logits " + shape_string(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const Index rows = z.dim(0), c = z.dim(1);
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || l >= c) throw DataError("cross_entropy: label " + std::to_string(l) + " out of range [0," + std::to_string(c) + ")");
  }
  // Saved softmax for backward.
  auto probs = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(z.size()));
  Scalar total = 0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar* x = z.data() + r * c;
    Scalar mx = x[0];
    for (Index k = 1; k < c; ++k) mx = std::max(mx, x[k]);
    Scalar s = 0;
    for (Index k = 0; k < c; ++k) s += std::exp(x[k] - mx);
    const Scalar lse = mx + std::log(s);
    for (Index k = 0; k < c; ++k) (*probs)[static_cast<std::size_t>(r * c + k)] = std::exp(x[k] - lse);
    total += lse - x[lab[static_cast<std::size_t>(r)]];
  }
  const auto n = static_cast<Scalar>(rows);
  return logits.tape->push(OpKind::cross_entropy, Tensor<Scalar>::scalar(total / n), {logits.id},
                           [pz = logits.id, probs, lab = std::move(lab), rows, c, n](Tape<Scalar>& t, NodeId self) {
                             const Scalar g = t.node(self).grad[0] / n;
                             auto& gz = t.grad_ref(pz);
                             for (Index r = 0; r < rows; ++r) {
                               for (Index k = 0; k < c; ++k) gz[r * c + k] += g * (*probs)[static_cast<std::size_t>(r * c + k)];
                               gz[r * c + lab[static_cast<std::size_t>(r)]] -= g;
                             }
                           });
}

template <typename Scalar>
Var<Scalar> masked_mse(Var<Scalar> pred, const Tensor<Scalar>& target, std::span<const std::uint8_t> mask) {
  const auto& pv = pred.value();
  if (pv.rank() != 3 || pv.shape() != target.shape() || static_cast<Index>(mask.size()) != pv.dim(0) * pv.dim(1)) {
    throw DimensionError("masked_mse: pred " + shape_string(pv.shape()) + " target " + shape_string(target.shape()));
  }
  const Index width = pv.dim(2);
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  Index masked = 0;
  for (auto f : m) masked += f ? 1 : 0;
  if (masked == 0) throw ContractError("masked_mse: mask selects no tokens");
  const auto n = static_cast<Scalar>(masked * width);
  Scalar total = 0;
  for (std::size_t r = 0; r < m.size(); ++r) {
    if (!m[r]) continue;
    for (Index k = 0; k < width; ++k) {
      const Index i = static_cast<Index>(r) * width + k;
      const Scalar d = pv[i] - target[i];
      total += d * d;
    }
  }
  return pred.tape->push(OpKind::masked_mse, Tensor<Scalar>::scalar(total / n), {pred.id},
                         [pp = pred.id, target, m = std::move(m), width, n](Tape<Scalar>& t, NodeId self) {
                           const Scalar g = t.node(self).grad[0];
                           const auto& pv = t.value(pp);
                           auto& gp = t.grad_ref(pp);
                           for (std::size_t r = 0; r < m.size(); ++r) {
                             if (!m[r]) continue;
                             for (Index k = 0; k < width; ++k) {
                               const Index i = static_cast<Index>(r) * width + k;
                               gp[i] += g * Scalar(2) * (pv[i] - target[i]) / n;
                             }
                           }
                         });
}

#define IAT_INSTANTIATE_NN(S)                                                                        \
  template void init_backbone(ModelParams<S>&, const BackboneConfig&, Rng&);                         \
  template void init_task_head(ModelParams<S>&, Index, Index, Rng&);                                 \
  template void init_id_head(ModelParams<S>&, Index, Index, int, Rng&);                              \
  template void init_decoder(ModelParams<S>&, const BackboneConfig&, const DecoderConfig&, Rng&);    \
  template int id_head_depth(const ModelParams<S>&);                                                 \
  template Var<S> linear(const Bound<S>&, const std::string&, Var<S>);                               \
  template Var<S> transformer_block(const Bound<S>&, const std::string&, Var<S>, Index, Index, Index); \
  template Var<S> embed_patches(const Bound<S>&, const BackboneConfig&, Var<S>);                     \
  template Var<S> encode_tokens(const Bound<S>&, const BackboneConfig&, Var<S>);                     \
  template Var<S> backbone_forward(const Bound<S>&, const BackboneConfig&, Var<S>);                  \
  template Var<S> task_head_forward(const Bound<S>&, Var<S>);                                        \
  template Var<S> id_head_forward(const Bound<S>&, Var<S>, int);                                     \
  template Var<S> bce_multilabel(Var<S>, const Tensor<S>&);                                          \
  template Var<S> cross_entropy(Var<S>, std::span<const int>);                                       \
  template Var<S> masked_mse(Var<S>, const Tensor<S>&, std::span<const std::uint8_t>);

IAT_INSTANTIATE_NN(float)
IAT_INSTANTIATE_NN(double)

#undef IAT_INSTANTIATE_NN

}  // namespace iat
