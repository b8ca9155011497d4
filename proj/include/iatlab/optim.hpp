// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "iatlab/nn.hpp"

namespace iat {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay. Decay is applied only to parameters
/// flagged as decaying (weight matrices); biases, norm gains and positional
/// terms are exempt.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One update at learning rate lr. Every parameter with a gradient is
  /// updated from its own moment buffers; parameters without a gradient are
  /// left untouched. Throws NumericError (before touching anything) if a
  /// gradient is not finite.
  void step(ModelParams<Scalar>& params, const GradientMap<Scalar>& grads, double lr);

  std::int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Moments {
    Tensor<Scalar> m, v;
  };
  AdamWConfig cfg_;
  std::map<std::string, Moments> state_;
  std::int64_t step_ = 0;
};

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
};

/// Heavy-ball SGD: v <- momentum * v + g; w <- w - lr * v.
template <typename Scalar>
class SgdMomentum {
 public:
  explicit SgdMomentum(SgdConfig cfg = {}) : cfg_(cfg) {}

  void step(ModelParams<Scalar>& params, const GradientMap<Scalar>& grads, double lr);
  void step(ModelParams<Scalar>& params, const GradientMap<Scalar>& grads) { step(params, grads, cfg_.lr); }

  std::int64_t steps() const { return step_; }
  const Tensor<Scalar>& velocity(const std::string& name) const { return velocity_.at(name); }

 private:
  SgdConfig cfg_;
  std::map<std::string, Tensor<Scalar>> velocity_;
  std::int64_t step_ = 0;
};

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
/// at total_steps.
double lr_schedule(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double base_lr);

}  // namespace iat
