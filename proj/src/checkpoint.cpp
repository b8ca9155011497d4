// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/checkpoint.hpp"

namespace iat {

namespace {
constexpr char kMagic[8] = {'I', 'A', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

bool decays_by_name(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0;
}

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 8));
  w.put(kVersion);
  w.put_string(ckpt.metadata.dump());
  w.put(static_cast<std::uint32_t>(ckpt.params.entries().size()));
  for (const auto& [name, e] : ckpt.params.entries()) {
    w.put_string(name);
    w.put(static_cast<std::uint8_t>(DType::f32));
    w.put(static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(e.value.data()),
                          static_cast<std::size_t>(e.value.size()) * sizeof(float)));
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  auto magic = r.get_bytes(8);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kMagic))) {
    throw CheckpointError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  try {
    ckpt.metadata = Json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const auto tag = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    const auto n = static_cast<std::size_t>(shape_size(shape));
    std::vector<float> data(n);
    if (tag == static_cast<std::uint8_t>(DType::f32)) {
      auto payload = r.get_bytes(n * sizeof(float));
      std::memcpy(data.data(), payload.data(), payload.size());
    } else if (tag == static_cast<std::uint8_t>(DType::f64)) {
      auto payload = r.get_bytes(n * sizeof(double));
      for (std::size_t k = 0; k < n; ++k) {
        double v;
        std::memcpy(&v, payload.data() + k * sizeof(double), sizeof(double));
        data[k] = static_cast<float>(v);
      }
    } else {
      throw CheckpointError("checkpoint: unknown dtype tag for '" + name + "'");
    }
    try {
      ckpt.params.add(name, Tensor<float>(std::move(shape), std::move(data)), decays_by_name(name));
    } catch (const Error& e) {
      throw CheckpointError(std::string("checkpoint record '") + name + "': " + e.what());
    }
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace iat
