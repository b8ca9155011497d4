// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container:
//
//   magic    8 bytes  "IATCKPT\0"
//   version  u32      1
//   metadata u32 length + UTF-8 JSON (config, seed, epoch, ...)
//   count    u32      number of tensor records
//   record   u32 name length + name bytes, u8 dtype tag (0 = f32, 1 = f64),
//            u32 rank, u64 dims[rank], little-endian payload
//
// Records are written in name order, so equal parameters give equal bytes.

#pragma once

#include <filesystem>

#include "iatlab/io.hpp"
#include "iatlab/json_util.hpp"
#include "iatlab/nn.hpp"

namespace iat {

struct Checkpoint {
  Json metadata = Json::object();
  ModelParams<float> params;
};

/// Weight matrices (names ending in ".w") decay; everything else does not.
bool decays_by_name(const std::string& name);

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iat
