// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iatlab/autodiff.hpp"
#include "iatlab/rng.hpp"

namespace iat {

/// Parameter groups. A parameter's group is fixed by its name prefix
/// ("backbone.", "task_head.", "id_head.", "decoder.").
enum class ParamGroup { backbone, task_head, id_head, decoder };

const char* to_string(ParamGroup group);
ParamGroup group_of(std::string_view name);

/// Named parameter collection, ordered by name.
template <typename Scalar>
class ModelParams {
 public:
  struct Entry {
    Tensor<Scalar> value;
    bool decay = true;
  };

  void add(const std::string& name, Tensor<Scalar> value, bool decay);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor<Scalar>& at(const std::string& name);
  const Tensor<Scalar>& at(const std::string& name) const;
  bool decays(const std::string& name) const { return entry(name).decay; }

  std::vector<std::string> names() const;
  std::vector<std::string> names(ParamGroup group) const;
  bool has_group(ParamGroup group) const { return !names(group).empty(); }

  ModelParams subset(std::initializer_list<ParamGroup> groups) const;
  void erase_group(ParamGroup group);
  /// Inserts or overwrites every entry of other.
  void merge(const ModelParams& other);
  Index count() const;

  const std::map<std::string, Entry>& entries() const { return entries_; }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<Other>(), e.decay);
    return out;
  }

  bool operator==(const ModelParams& other) const;

 private:
  const Entry& entry(const std::string& name) const;
  std::map<std::string, Entry> entries_;
};

/// ModelParams placed on a tape as leaves. Frozen groups become constants.
template <typename Scalar>
class Bound {
 public:
  Bound(Tape<Scalar>& tape, const ModelParams<Scalar>& params, std::initializer_list<ParamGroup> frozen = {});

  Var<Scalar> operator[](const std::string& name) const;
  Tape<Scalar>& tape() const { return *tape_; }
  /// Trainable (non-frozen) parameters.
  const std::map<std::string, Var<Scalar>>& trainable() const { return trainable_; }

 private:
  Tape<Scalar>* tape_;
  std::map<std::string, Var<Scalar>> vars_;
  std::map<std::string, Var<Scalar>> trainable_;
};

struct BackboneConfig {
  Index image_size = 16;
  Index patch_size = 4;
  Index channels = 1;
  Index embed_dim = 32;
  Index depth = 2;
  Index n_heads = 2;
  Index mlp_ratio = 2;
  double ln_eps = 1e-6;

  Index grid() const { return image_size / patch_size; }
  Index tokens() const { return grid() * grid(); }
  Index patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

struct DecoderConfig {
  Index embed_dim = 16;
  Index depth = 1;
  Index n_heads = 2;
  Index mlp_ratio = 2;
  void validate() const;
};

// Initialization: truncated normal (std 0.02) weights, zero biases, unit
// layer-norm gains.
template <typename Scalar>
void init_backbone(ModelParams<Scalar>& params, const BackboneConfig& cfg, Rng& rng);
template <typename Scalar>
void init_task_head(ModelParams<Scalar>& params, Index dim, Index n_au, Rng& rng);
/// depth-k identity head: k-1 hidden (linear + relu) stages of width dim,
/// then a linear map to n_subjects.
template <typename Scalar>
void init_id_head(ModelParams<Scalar>& params, Index dim, Index n_subjects, int depth, Rng& rng);
template <typename Scalar>
void init_decoder(ModelParams<Scalar>& params, const BackboneConfig& enc, const DecoderConfig& cfg, Rng& rng);

/// Number of id_head layers present in params (0 when the head is absent).
template <typename Scalar>
int id_head_depth(const ModelParams<Scalar>& params);

/// x [N, in] -> [N, out] using prefix.w and prefix.b.
template <typename Scalar>
Var<Scalar> linear(const Bound<Scalar>& p, const std::string& prefix, Var<Scalar> x);

/// Pre-norm transformer block on x [B*T, D].
template <typename Scalar>
Var<Scalar> transformer_block(const Bound<Scalar>& p, const std::string& prefix, Var<Scalar> x, Index batch,
                              Index tokens, Index heads);

/// Patch embedding plus positional terms: images [B,S,S,C] -> [B,T,D].
template <typename Scalar>
Var<Scalar> embed_patches(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images);

/// Transformer blocks and final norm over a token sequence [B,N,D].
template <typename Scalar>
Var<Scalar> encode_tokens(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> tokens);

/// Feature f = mean over the encoded patch tokens: images [B,S,S,C] -> [B,D].
template <typename Scalar>
Var<Scalar> backbone_forward(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images);

template <typename Scalar>
Var<Scalar> task_head_forward(const Bound<Scalar>& p, Var<Scalar> features);

template <typename Scalar>
Var<Scalar> id_head_forward(const Bound<Scalar>& p, Var<Scalar> features, int depth);

// Losses --------------------------------------------------------------------

/// Mean binary cross-entropy over all B*n_au logits, in the stable form
/// max(z,0) - z*t + log(1 + exp(-|z|)). Targets must be 0 or 1.
template <typename Scalar>
Var<Scalar> bce_multilabel(Var<Scalar> logits, const Tensor<Scalar>& targets);

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> labels);

/// Squared error averaged over the pixels of masked tokens only.
/// pred/target are [B,T,P]; mask holds B*T flags (nonzero = masked).
template <typename Scalar>
Var<Scalar> masked_mse(Var<Scalar> pred, const Tensor<Scalar>& target, std::span<const std::uint8_t> mask);

}  // namespace iat
