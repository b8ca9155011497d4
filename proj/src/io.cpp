// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/io.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

namespace iat {

namespace {
constexpr char kTensorMagic[8] = {'I', 'A', 'T', 'T', 'N', 'S', 'R', '\0'};
constexpr std::uint32_t kTensorVersion = 1;
}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

void ByteReader::need(std::size_t n) const {
  if (pos_ + n > bytes_.size()) throw CheckpointError(context_ + ": truncated data");
}

Bytes encode_tensor_file(const Tensor<float>& t) {
  ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kTensorMagic), 8));
  w.put(kTensorVersion);
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float)));
  return std::move(w.bytes());
}

Tensor<float> decode_tensor_file(std::span<const std::uint8_t> bytes, const std::string& context) {
  try {
    ByteReader r(bytes, context);
    auto magic = r.get_bytes(8);
    if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kTensorMagic))) {
      throw DataError(context + ": bad tensor file magic");
    }
    if (r.get<std::uint32_t>() != kTensorVersion) throw DataError(context + ": unsupported tensor file version");
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    std::vector<float> data(static_cast<std::size_t>(shape_size(shape)));
    auto payload = r.get_bytes(data.size() * sizeof(float));
    std::memcpy(data.data(), payload.data(), payload.size());
    if (!r.done()) throw DataError(context + ": trailing bytes in tensor file");
    return Tensor<float>(std::move(shape), std::move(data));
  } catch (const CheckpointError& e) {
    throw DataError(e.what());
  }
}

}  // namespace iat
