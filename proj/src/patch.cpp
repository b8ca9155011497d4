// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/patch.hpp"

#include <cmath>

namespace iat {

namespace {

struct PatchGeometry {
  Index batch, side, channels, patch, grid;
};

// Visits every (image offset, token offset) pair in the same order for both
// directions so that the two are exact inverses.
template <typename Fn>
void for_each_patch_element(const PatchGeometry& g, Fn&& fn) {
  const Index token_len = g.patch * g.patch * g.channels;
  const Index tokens = g.grid * g.grid;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index gy = 0; gy < g.grid; ++gy) {
      for (Index gx = 0; gx < g.grid; ++gx) {
        const Index t = gy * g.grid + gx;
        for (Index py = 0; py < g.patch; ++py) {
          for (Index px = 0; px < g.patch; ++px) {
            const Index y = gy * g.patch + py;
            const Index x = gx * g.patch + px;
            for (Index c = 0; c < g.channels; ++c) {
              const Index img = ((b * g.side + y) * g.side + x) * g.channels + c;
              const Index tok = (b * tokens + t) * token_len + (py * g.patch + px) * g.channels + c;
              fn(img, tok);
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> patchify(const Tensor<Scalar>& images, Index patch) {
  if (images.rank() != 4 || images.dim(1) != images.dim(2)) {
    throw DimensionError("patchify expects [B,S,S,C] images, got " + shape_string(images.shape()));
  }
  if (patch <= 0 || images.dim(1) % patch != 0) {
    throw DimensionError("image side " + std::to_string(images.dim(1)) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const PatchGeometry g{images.dim(0), images.dim(1), images.dim(3), patch, images.dim(1) / patch};
  Tensor<Scalar> out(Shape{g.batch, g.grid * g.grid, patch * patch * g.channels});
  for_each_patch_element(g, [&](Index img, Index tok) { out[tok] = images[img]; });
  return out;
}

template <typename Scalar>
Tensor<Scalar> unpatchify(const Tensor<Scalar>& tokens, Index patch, Index channels) {
  if (tokens.rank() != 3 || patch <= 0 || channels <= 0 || tokens.dim(2) != patch * patch * channels) {
    throw DimensionError("unpatchify: token shape " + shape_string(tokens.shape()) + " incompatible with patch " +
                         std::to_string(patch));
  }
  const auto grid = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(tokens.dim(1)))));
  if (grid * grid != tokens.dim(1)) {
    throw DimensionError("unpatchify: token count " + std::to_string(tokens.dim(1)) + " is not a square");
  }
  const PatchGeometry g{tokens.dim(0), grid * patch, channels, patch, grid};
  Tensor<Scalar> out(Shape{g.batch, g.side, g.side, channels});
  for_each_patch_element(g, [&](Index img, Index tok) { out[img] = tokens[tok]; });
  return out;
}

template Tensor<float> patchify(const Tensor<float>&, Index);
template Tensor<double> patchify(const Tensor<double>&, Index);
template Tensor<float> unpatchify(const Tensor<float>&, Index, Index);
template Tensor<double> unpatchify(const Tensor<double>&, Index, Index);

}  // namespace iat
