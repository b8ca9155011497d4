// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "iatlab/tensor.hpp"

namespace iat {

/// Splits [B,S,S,C] images into non-overlapping PxP patches.
///
/// Token t = gy * (S/P) + gx covers rows [gy*P, gy*P+P) and columns
/// [gx*P, gx*P+P); its P*P*C values are stored in (row, col, channel)
/// row-major order. Result shape is [B, (S/P)^2, P*P*C].
template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& images, Index patch);

/// Inverse of patchify: [B,T,P*P*C] -> [B,S,S,C].
template <typename Scalar>
Tensor<Scalar> unpatchify(const Tensor<Scalar>& tokens, Index patch, Index channels);

}  // namespace iat
