// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "iatlab/io.hpp"

namespace iat {

namespace {
// Stream tags for Rng(seed, {tag, ...}).
constexpr std::uint64_t kSignatureStream = 1;
constexpr std::uint64_t kSampleStream = 2;
constexpr std::uint64_t kProbeStream = 3;
constexpr std::uint64_t kFoldStream = 4;
}  // namespace

std::vector<BlobPosition> DatasetSpec::default_blob_positions() {
  // Outer ring of the 4x4 patch grid; the four centre cells carry no AU.
  return {{0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 0}, {1, 3}, {2, 0}, {2, 3}, {3, 0}, {3, 1}, {3, 2}, {3, 3}};
}

std::vector<double> DatasetSpec::default_au_prior() {
  return {0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.30, 0.25, 0.35, 0.40, 0.20};
}

void DatasetSpec::validate() const {
  if (n_subjects <= 0 || images_per_subject <= 0 || image_size <= 0 || blob_size <= 0 || n_au <= 0) {
    throw ConfigError("dataset sizes must be positive");
  }
  if (image_size % blob_size != 0) throw ConfigError("image_size must be divisible by blob_size");
  if (static_cast<Index>(au_blob_positions.size()) != n_au) {
    throw ConfigError("au_blob_positions has " + std::to_string(au_blob_positions.size()) + " entries, n_au is " +
                      std::to_string(n_au));
  }
  if (static_cast<Index>(au_prior.size()) != n_au) throw ConfigError("au_prior must have n_au entries");
  const Index grid = image_size / blob_size;
  std::set<std::pair<Index, Index>> used;
  for (const auto& p : au_blob_positions) {
    if (p.row < 0 || p.col < 0 || p.row >= grid || p.col >= grid) {
      throw ConfigError("blob position (" + std::to_string(p.row) + "," + std::to_string(p.col) + ") out of bounds");
    }
    if (!used.insert({p.row, p.col}).second) {
      throw ConfigError("blob positions overlap at (" + std::to_string(p.row) + "," + std::to_string(p.col) + ")");
    }
  }
  for (double p : au_prior) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("au_prior entries must lie in [0,1]");
  }
  if (!(identity_signature_strength >= 0.0) || !(pixel_noise_std >= 0.0)) {
    throw ConfigError("signature strength and noise std must be non-negative");
  }
  if (!(amplitude_min <= amplitude_max) || !(amplitude_min >= 0.0)) throw ConfigError("bad amplitude range");
  if (signature_kind != "white" && signature_kind != "tiled") {
    throw ConfigError("signature_kind must be \"white\" or \"tiled\", got \"" + signature_kind + "\"");
  }
  if (au_shape != "bump" && au_shape != "dct") {
    throw ConfigError("au_shape must be \"bump\" or \"dct\", got \"" + au_shape + "\"");
  }
  if (au_shape == "dct" && n_au > blob_size * blob_size - 1) {
    throw ConfigError("au_shape \"dct\" supports at most blob_size^2 - 1 AUs");
  }
  if (!(resting_offset_std >= 0.0)) throw ConfigError("resting_offset_std must be non-negative");
}

Json to_json(const DatasetSpec& spec) {
  Json positions = Json::array();
  for (const auto& p : spec.au_blob_positions) positions.push_back(Json::array({p.row, p.col}));
  Json j;
  j["n_subjects"] = spec.n_subjects;
  j["images_per_subject"] = spec.images_per_subject;
  j["image_size"] = spec.image_size;
  j["blob_size"] = spec.blob_size;
  j["n_au"] = spec.n_au;
  j["au_blob_positions"] = positions;
  j["identity_signature_strength"] = spec.identity_signature_strength;
  j["pixel_noise_std"] = spec.pixel_noise_std;
  j["amplitude_min"] = spec.amplitude_min;
  j["amplitude_max"] = spec.amplitude_max;
  j["signature_kind"] = spec.signature_kind;
  j["au_shape"] = spec.au_shape;
  j["resting_offset_std"] = spec.resting_offset_std;
  j["au_prior"] = spec.au_prior;
  j["seed"] = spec.seed;
  return j;
}

DatasetSpec dataset_spec_from_json(const Json& j, const std::string& path) {
  DatasetSpec s;
  StrictObject o(j, path);
  o.read("n_subjects", s.n_subjects);
  o.read("images_per_subject", s.images_per_subject);
  o.read("image_size", s.image_size);
  o.read("blob_size", s.blob_size);
  o.read("n_au", s.n_au);
  if (const Json* pos = o.child("au_blob_positions")) {
    s.au_blob_positions.clear();
    if (!pos->is_array()) throw ConfigError(path + ".au_blob_positions: expected an array");
    for (const auto& p : *pos) {
      if (!p.is_array() || p.size() != 2) throw ConfigError(path + ".au_blob_positions: entries are [row, col]");
      s.au_blob_positions.push_back({p[0].get<Index>(), p[1].get<Index>()});
    }
  }
  o.read("identity_signature_strength", s.identity_signature_strength);
  o.read("pixel_noise_std", s.pixel_noise_std);
  o.read("amplitude_min", s.amplitude_min);
  o.read("amplitude_max", s.amplitude_max);
  o.read("signature_kind", s.signature_kind);
  o.read("au_shape", s.au_shape);
  o.read("resting_offset_std", s.resting_offset_std);
  o.read("au_prior", s.au_prior);
  o.read("seed", s.seed);
  o.finish();
  return s;
}

// ---------------------------------------------------------------------------
// Generation

std::vector<double> blob_shape(Index blob_size) {
  // Separable raised-cosine bump centred in the cell.
  std::vector<double> w(static_cast<std::size_t>(blob_size));
  for (Index i = 0; i < blob_size; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(blob_size);
    w[static_cast<std::size_t>(i)] = std::sin(3.14159265358979323846 * u);
  }
  double peak = 0.0;
  for (double a : w)
    for (double b : w) peak = std::max(peak, a * b);
  std::vector<double> shape(static_cast<std::size_t>(blob_size * blob_size));
  for (Index y = 0; y < blob_size; ++y)
    for (Index x = 0; x < blob_size; ++x)
      shape[static_cast<std::size_t>(y * blob_size + x)] = w[static_cast<std::size_t>(y)] * w[static_cast<std::size_t>(x)] / peak;
  return shape;
}

std::vector<double> au_shape(const DatasetSpec& spec, Index a) {
  const Index b = spec.blob_size;
  if (spec.au_shape == "bump") return blob_shape(b);
  std::vector<std::pair<Index, Index>> freqs;
  for (Index sum = 1; sum <= 2 * (b - 1); ++sum)
    for (Index u = 0; u < b; ++u)
      if (sum - u >= 0 && sum - u < b) freqs.emplace_back(u, sum - u);
  const auto [u, v] = freqs.at(static_cast<std::size_t>(a));
  constexpr double kPi = 3.14159265358979323846;
  std::vector<double> p(static_cast<std::size_t>(b * b));
  double peak = 0.0;
  for (Index y = 0; y < b; ++y)
    for (Index x = 0; x < b; ++x) {
      const double val = std::cos(kPi * static_cast<double>((2 * x + 1) * u) / static_cast<double>(2 * b)) *
                         std::cos(kPi * static_cast<double>((2 * y + 1) * v) / static_cast<double>(2 * b));
      p[static_cast<std::size_t>(y * b + x)] = val;
      peak = std::max(peak, std::abs(val));
    }
  for (auto& q : p) q /= peak;
  return p;
}

namespace {

// Removes from tile its components along the constant and every AU shape.
void project_out_shapes(const DatasetSpec& spec, std::vector<double>& tile) {
  std::vector<std::vector<double>> basis;
  auto add = [&](std::vector<double> v) {
    for (const auto& e : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) d += v[i] * e[i];
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * e[i];
    }
    double n = 0.0;
    for (double q : v) n += q * q;
    n = std::sqrt(n);
    if (n < 1e-9) return;
    for (auto& q : v) q /= n;
    basis.push_back(std::move(v));
  };
  add(std::vector<double>(tile.size(), 1.0));
  for (Index a = 0; a < spec.n_au; ++a) add(au_shape(spec, a));
  for (const auto& e : basis) {
    double d = 0.0;
    for (std::size_t i = 0; i < tile.size(); ++i) d += tile[i] * e[i];
    for (std::size_t i = 0; i < tile.size(); ++i) tile[i] -= d * e[i];
  }
}

}  // namespace

std::vector<double> identity_signature(const DatasetSpec& spec, int subject) {
  Rng rng(spec.seed, {kSignatureStream, static_cast<std::uint64_t>(subject)});
  const Index s = spec.image_size;
  const Index b = spec.blob_size;
  std::vector<double> sig(static_cast<std::size_t>(s * s));
  if (spec.signature_kind == "white") {
    for (auto& v : sig) v = rng.normal();
  } else {
    std::vector<double> tile(static_cast<std::size_t>(b * b));
    for (auto& v : tile) v = rng.normal();
    project_out_shapes(spec, tile);
    double ss = 0.0;
    for (double v : tile) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(tile.size()));
    for (Index y = 0; y < s; ++y)
      for (Index x = 0; x < s; ++x)
        sig[static_cast<std::size_t>(y * s + x)] = rms > 0.0 ? tile[static_cast<std::size_t>((y % b) * b + x % b)] / rms : 0.0;
  }
  for (Index a = 0; a < spec.n_au; ++a) {
    const double offset = spec.resting_offset_std * rng.normal();
    const auto shape = au_shape(spec, a);
    const auto& pos = spec.au_blob_positions[static_cast<std::size_t>(a)];
    for (Index y = 0; y < b; ++y)
      for (Index x = 0; x < b; ++x)
        sig[static_cast<std::size_t>((pos.row * b + y) * s + pos.col * b + x)] += offset * shape[static_cast<std::size_t>(y * b + x)];
  }
  return sig;
}

SampleDraw draw_sample(const DatasetSpec& spec, Rng& rng) {
  SampleDraw d;
  d.labels.resize(static_cast<std::size_t>(spec.n_au));
  d.amplitudes.resize(static_cast<std::size_t>(spec.n_au));
  for (Index a = 0; a < spec.n_au; ++a) {
    const bool on = rng.bernoulli(spec.au_prior[static_cast<std::size_t>(a)]);
    const double amp = rng.uniform(spec.amplitude_min, spec.amplitude_max);
    d.labels[static_cast<std::size_t>(a)] = on ? 1 : 0;
    d.amplitudes[static_cast<std::size_t>(a)] = on ? amp : 0.0;
  }
  return d;
}

std::vector<float> render_image(const DatasetSpec& spec, std::span<const double> signature, const SampleDraw& draw,
                                Rng& noise_rng) {
  const Index s = spec.image_size;
  std::vector<double> img(static_cast<std::size_t>(s * s));
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = spec.identity_signature_strength * signature[i];
  for (Index a = 0; a < spec.n_au; ++a) {
    const double amp = draw.amplitudes[static_cast<std::size_t>(a)];
    if (amp == 0.0) continue;
    const auto& pos = spec.au_blob_positions[static_cast<std::size_t>(a)];
    const std::vector<double> bump = au_shape(spec, a);
    for (Index y = 0; y < spec.blob_size; ++y)
      for (Index x = 0; x < spec.blob_size; ++x) {
        const Index py = pos.row * spec.blob_size + y;
        const Index px = pos.col * spec.blob_size + x;
        img[static_cast<std::size_t>(py * s + px)] += amp * bump[static_cast<std::size_t>(y * spec.blob_size + x)];
      }
  }
  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = static_cast<float>(img[i] + spec.pixel_noise_std * noise_rng.normal());
  }
  return out;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const Index n = spec.size();
  const Index pixels = spec.image_size * spec.image_size;
  ds.images = Tensor<float>(Shape{n, spec.image_size, spec.image_size, 1});
  ds.au_labels.resize(static_cast<std::size_t>(n * spec.n_au));
  ds.subject_ids.resize(static_cast<std::size_t>(n));
  ds.sample_index.resize(static_cast<std::size_t>(n));
  for (Index subj = 0; subj < spec.n_subjects; ++subj) {
    const auto sig = identity_signature(spec, static_cast<int>(subj));
    for (Index k = 0; k < spec.images_per_subject; ++k) {
      const Index row = subj * spec.images_per_subject + k;
      Rng rng(spec.seed, {kSampleStream, static_cast<std::uint64_t>(subj), static_cast<std::uint64_t>(k)});
      const SampleDraw draw = draw_sample(spec, rng);
      const auto img = render_image(spec, sig, draw, rng);
      std::copy(img.begin(), img.end(), ds.images.data() + row * pixels);
      std::copy(draw.labels.begin(), draw.labels.end(), ds.au_labels.begin() + row * spec.n_au);
      ds.subject_ids[static_cast<std::size_t>(row)] = static_cast<int>(subj);
      ds.sample_index[static_cast<std::size_t>(row)] = static_cast<int>(k);
    }
  }
  return ds;
}

Tensor<float> Dataset::images_at(std::span<const Index> rows) const {
  const Index s = spec.image_size;
  const Index pixels = s * s;
  Tensor<float> out(Shape{static_cast<Index>(rows.size()), s, s, 1});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(images.data() + rows[i] * pixels, pixels, out.data() + static_cast<Index>(i) * pixels);
  }
  return out;
}

Tensor<float> Dataset::labels_at(std::span<const Index> rows) const {
  Tensor<float> out(Shape{static_cast<Index>(rows.size()), spec.n_au});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index a = 0; a < spec.n_au; ++a)
      out[static_cast<Index>(i) * spec.n_au + a] = au_labels[static_cast<std::size_t>(rows[i] * spec.n_au + a)];
  return out;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<int> FoldSplit::test_subjects(int fold) const {
  if (fold < 0 || fold >= k) throw ConfigError("fold index " + std::to_string(fold) + " out of range");
  std::vector<int> out;
  for (std::size_t s = 0; s < assignment.size(); ++s)
    if (assignment[s] == fold) out.push_back(static_cast<int>(s));
  return out;
}

std::vector<int> FoldSplit::train_subjects(int fold) const {
  if (fold < 0 || fold >= k) throw ConfigError("fold index " + std::to_string(fold) + " out of range");
  std::vector<int> out;
  for (std::size_t s = 0; s < assignment.size(); ++s)
    if (assignment[s] != fold) out.push_back(static_cast<int>(s));
  return out;
}

FoldSplit split_subject_exclusive(Index n_subjects, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("subject-exclusive split needs k >= 2");
  if (k > n_subjects) throw ConfigError("k exceeds the number of subjects");
  std::vector<int> order(static_cast<std::size_t>(n_subjects));
  for (Index s = 0; s < n_subjects; ++s) order[static_cast<std::size_t>(s)] = static_cast<int>(s);
  Rng rng(seed, {kFoldStream});
  rng.shuffle(order);
  FoldSplit split;
  split.k = k;
  split.assignment.assign(static_cast<std::size_t>(n_subjects), -1);
  for (std::size_t i = 0; i < order.size(); ++i) split.assignment[static_cast<std::size_t>(order[i])] = static_cast<int>(i % static_cast<std::size_t>(k));
  return split;
}

FoldSplit split_subject_exclusive(const Dataset& dataset, int k, std::uint64_t seed) {
  return split_subject_exclusive(dataset.spec.n_subjects, k, seed);
}

std::vector<Index> rows_for_subjects(const Dataset& dataset, std::span<const int> subjects) {
  std::set<int> wanted(subjects.begin(), subjects.end());
  std::vector<Index> rows;
  for (Index r = 0; r < dataset.size(); ++r) {
    if (wanted.count(dataset.subject_ids[static_cast<std::size_t>(r)])) rows.push_back(r);
  }
  return rows;
}

ProbeSplit probe_split(const Dataset& dataset, Index train_per_subject, Index test_per_subject, std::uint64_t seed) {
  if (train_per_subject <= 0 || test_per_subject <= 0) throw ConfigError("probe split sizes must be positive");
  std::vector<std::vector<Index>> by_subject(static_cast<std::size_t>(dataset.spec.n_subjects));
  for (Index r = 0; r < dataset.size(); ++r) by_subject[static_cast<std::size_t>(dataset.subject_ids[static_cast<std::size_t>(r)])].push_back(r);
  ProbeSplit split;
  for (std::size_t s = 0; s < by_subject.size(); ++s) {
    auto& rows = by_subject[s];
    if (static_cast<Index>(rows.size()) < train_per_subject + test_per_subject) {
      throw DataError("subject " + std::to_string(s) + " has " + std::to_string(rows.size()) +
                      " samples, probe split needs " + std::to_string(train_per_subject + test_per_subject));
    }
    Rng rng(seed, {kProbeStream, static_cast<std::uint64_t>(s)});
    rng.shuffle(rows);
    split.train.insert(split.train.end(), rows.begin(), rows.begin() + train_per_subject);
    split.test.insert(split.test.end(), rows.begin() + train_per_subject, rows.begin() + train_per_subject + test_per_subject);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Serialization

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  const Index n = dataset.size();
  Tensor<float> labels(Shape{n, dataset.spec.n_au});
  for (Index i = 0; i < labels.size(); ++i) labels[i] = dataset.au_labels[static_cast<std::size_t>(i)];
  Tensor<float> subjects(Shape{n, 2});
  for (Index i = 0; i < n; ++i) {
    subjects[2 * i] = static_cast<float>(dataset.subject_ids[static_cast<std::size_t>(i)]);
    subjects[2 * i + 1] = static_cast<float>(dataset.sample_index[static_cast<std::size_t>(i)]);
  }
  Json manifest;
  manifest["format"] = "iatlab-dataset";
  manifest["version"] = 1;
  manifest["spec"] = to_json(dataset.spec);
  manifest["samples"] = n;
  Json files = Json::object();
  const std::pair<const char*, const Tensor<float>*> parts[] = {
      {"images.bin", &dataset.images}, {"au_labels.bin", &labels}, {"subjects.bin", &subjects}};
  for (const auto& [name, tensor] : parts) {
    const Bytes bytes = encode_tensor_file(*tensor);
    write_file(dir / name, bytes);
    files[name] = {{"fnv1a64", hex64(fnv1a64(bytes))}, {"shape", tensor->shape()}};
  }
  manifest["files"] = files;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw IoError("no dataset manifest in '" + dir.string() + "'");
  }
  Json manifest;
  try {
    manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset manifest: " + std::string(e.what()));
  }
  auto load_part = [&](const char* name) {
    const Bytes bytes = read_file(dir / name);
    const std::string want = manifest.at("files").at(name).at("fnv1a64").get<std::string>();
    if (hex64(fnv1a64(bytes)) != want) throw DataError(std::string(name) + ": checksum mismatch");
    return decode_tensor_file(bytes, name);
  };
  Dataset ds;
  ds.spec = dataset_spec_from_json(manifest.at("spec"), "manifest.spec");
  ds.spec.validate();
  ds.images = load_part("images.bin");
  const Tensor<float> labels = load_part("au_labels.bin");
  const Tensor<float> subjects = load_part("subjects.bin");
  const Index n = ds.images.dim(0);
  if (labels.shape() != Shape{n, ds.spec.n_au} || subjects.shape() != Shape{n, 2} || n != ds.spec.size()) {
    throw DataError("dataset files disagree on sample count");
  }
  ds.au_labels.resize(static_cast<std::size_t>(labels.size()));
  for (Index i = 0; i < labels.size(); ++i) ds.au_labels[static_cast<std::size_t>(i)] = labels[i] != 0.0f ? 1 : 0;
  ds.subject_ids.resize(static_cast<std::size_t>(n));
  ds.sample_index.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    ds.subject_ids[static_cast<std::size_t>(i)] = static_cast<int>(subjects[2 * i]);
    ds.sample_index[static_cast<std::size_t>(i)] = static_cast<int>(subjects[2 * i + 1]);
  }
  return ds;
}

}  // namespace iat
