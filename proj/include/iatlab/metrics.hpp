// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "iatlab/tensor.hpp"

namespace iat {

struct F1Result {
  std::vector<double> per_class;
  /// True where TP = FP = FN = 0; such classes score 1.
  std::vector<bool> degenerate;
  double macro = 0.0;
};

/// Per-class F1 = 2TP / (2TP + FP + FN) over N x n_classes binary matrices
/// (row-major), plus the unweighted macro mean.
F1Result f1_metrics(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> targets, Index n_classes);

/// Binarizes logits at sigmoid(z) > 0.5, i.e. z > 0.
std::vector<std::uint8_t> threshold_logits(const Tensor<float>& logits);

}  // namespace iat
