// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/optim.hpp"

#include <cmath>
#include <numbers>

namespace iat {

namespace {

template <typename Scalar>
void check_grads(const ModelParams<Scalar>& params, const GradientMap<Scalar>& grads) {
  for (const auto& [name, g] : grads) {
    if (g.shape() != params.at(name).shape()) {
      throw DimensionError("gradient for '" + name + "' has shape " + shape_string(g.shape()) + ", parameter has " +
                           shape_string(params.at(name).shape()));
    }
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
  }
}

}  // namespace

template <typename Scalar>
void AdamW<Scalar>::step(ModelParams<Scalar>& params, const GradientMap<Scalar>& grads, double lr) {
  check_grads(params, grads);
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const auto b1 = static_cast<Scalar>(cfg_.beta1);
  const auto b2 = static_cast<Scalar>(cfg_.beta2);
  for (const auto& [name, g] : grads) {
    Tensor<Scalar>& w = params.at(name);
    auto [it, fresh] = state_.try_emplace(name);
    if (fresh) it->second = Moments{Tensor<Scalar>(w.shape()), Tensor<Scalar>(w.shape())};
    Moments& s = it->second;
    if (params.decays(name) && cfg_.weight_decay != 0.0) {
      w.array() *= static_cast<Scalar>(1.0 - lr * cfg_.weight_decay);
    }
    s.m.array() = b1 * s.m.array() + (Scalar(1) - b1) * g.array();
    s.v.array() = b2 * s.v.array() + (Scalar(1) - b2) * g.array().square();
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(cfg_.eps);
    w.array() -= step_size * s.m.array() / (s.v.array().sqrt() * inv_bc2 + eps);
  }
}

template <typename Scalar>
void SgdMomentum<Scalar>::step(ModelParams<Scalar>& params, const GradientMap<Scalar>& grads, double lr) {
  check_grads(params, grads);
  ++step_;
  const auto mu = static_cast<Scalar>(cfg_.momentum);
  const auto rate = static_cast<Scalar>(lr);
  for (const auto& [name, g] : grads) {
    Tensor<Scalar>& w = params.at(name);
    auto [it, fresh] = velocity_.try_emplace(name);
    if (fresh) it->second = Tensor<Scalar>(w.shape());
    it->second.array() = mu * it->second.array() + g.array();
    w.array() -= rate * it->second.array();
  }
}

template class AdamW<float>;
template class AdamW<double>;
template class SgdMomentum<float>;
template class SgdMomentum<double>;

double lr_schedule(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double base_lr) {
  if (warmup_steps < 0 || total_steps < 0) throw ConfigError("lr_schedule: step counts must be non-negative");
  if (warmup_steps > total_steps) throw ConfigError("lr_schedule: warmup_steps exceeds total_steps");
  if (step < 0 || step > total_steps) throw ConfigError("lr_schedule: step outside [0, total_steps]");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace iat
