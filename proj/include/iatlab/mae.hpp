// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Masked-autoencoder pretraining of the backbone.
//
// Each sample gets its own random mask. Visible tokens are embedded and run
// through the encoder; the decoder sees the encoded visible tokens scattered
// back into place with a shared learned mask token at every masked position,
// and predicts raw pixels. The loss covers masked tokens only.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "iatlab/data.hpp"
#include "iatlab/json_util.hpp"
#include "iatlab/nn.hpp"
#include "iatlab/optim.hpp"

namespace iat {

struct MaskPlan {
  Index total = 0;
  std::vector<Index> masked;   // ascending
  std::vector<Index> visible;  // ascending
  /// total flags, 1 where masked.
  std::vector<std::uint8_t> flags() const;
};

/// Uniformly random subset of round(ratio*T) tokens.
MaskPlan random_mask(Index total, double ratio, Rng& rng);

struct MaeConfig {
  BackboneConfig backbone{};
  DecoderConfig decoder{};
  double mask_ratio = 0.75;
  int epochs = 20;
  Index batch_size = 32;
  int warmup_epochs = 2;
  AdamWConfig optim{1.5e-3, 0.9, 0.95, 1e-8, 0.05};
  /// Number of dataset images used (first rows in dataset order); 0 = all.
  Index n_images = 512;
  std::uint64_t seed = 1;

  void validate() const;
};

Json to_json(const MaeConfig& cfg);
MaeConfig mae_config_from_json(const Json& j, const std::string& path = "pretrain");

template <typename Scalar>
struct MaeOutput {
  Var<Scalar> encoded;  // [B, V, D] encoder output on visible tokens
  Var<Scalar> pred;     // [B, T, P] pixel predictions
  Var<Scalar> loss;
};

/// plans holds one MaskPlan per sample; all must mask the same count.
template <typename Scalar>
MaeOutput<Scalar> mae_forward(const Bound<Scalar>& p, const BackboneConfig& enc, const DecoderConfig& dec,
                              Var<Scalar> images, std::span<const MaskPlan> plans);

/// One optimizer step on a batch; returns the loss before the update.
double mae_step(ModelParams<float>& params, const MaeConfig& cfg, const Tensor<float>& images,
                std::span<const MaskPlan> plans, AdamW<float>& opt, double lr);

/// Fresh backbone + decoder parameters for cfg.
ModelParams<float> init_mae(const MaeConfig& cfg);

struct PretrainResult {
  /// Backbone group only; the decoder is dropped.
  ModelParams<float> backbone;
  /// Mean training loss per epoch.
  std::vector<double> epoch_loss;
  /// Masked MSE on the pretraining images under a fixed evaluation mask,
  /// before training and after every epoch (size epochs + 1).
  std::vector<double> eval_loss;
};

using PretrainCallback = std::function<void(int epoch, double train_loss, double eval_loss)>;

PretrainResult pretrain(const MaeConfig& cfg, const Dataset& dataset, const PretrainCallback& on_epoch = {});

}  // namespace iat
