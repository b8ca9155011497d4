// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/metrics.hpp"

namespace iat {

F1Result f1_metrics(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> targets, Index n_classes) {
  if (n_classes <= 0 || predictions.size() != targets.size() ||
      predictions.size() % static_cast<std::size_t>(n_classes) != 0) {
    throw ContractError("f1_metrics: prediction/target shapes do not match");
  }
  const auto c = static_cast<std::size_t>(n_classes);
  std::vector<std::int64_t> tp(c), fp(c), fn(c);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] != 0;
    const bool t = targets[i] != 0;
    const std::size_t k = i % c;
    tp[k] += p && t;
    fp[k] += p && !t;
    fn[k] += !p && t;
  }
  F1Result r;
  r.per_class.resize(c);
  r.degenerate.resize(c);
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const std::int64_t denom = 2 * tp[k] + fp[k] + fn[k];
    r.degenerate[k] = denom == 0;
    r.per_class[k] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[k]) / static_cast<double>(denom);
    total += r.per_class[k];
  }
  r.macro = total / static_cast<double>(c);
  return r;
}

std::vector<std::uint8_t> threshold_logits(const Tensor<float>& logits) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(logits.size()));
  for (Index i = 0; i < logits.size(); ++i) out[static_cast<std::size_t>(i)] = logits[i] > 0.0f ? 1 : 0;
  return out;
}

}  // namespace iat
