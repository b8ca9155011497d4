// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic AU benchmark with a planted identity shortcut.
//
// Every subject owns a fixed full-image texture (its identity signature).
// Each sample draws AU activations independently of the subject, adds a
// fixed-shape blob at the designated patch of every active AU with a random
// amplitude, and finally adds i.i.d. Gaussian pixel noise.
//
// Signature kinds:
//   white  i.i.d. N(0,1) per pixel.
//   tiled  one blob-sized N(0,1) tile repeated over the patch grid, with the
//          constant and every AU shape projected out, rescaled to unit RMS.
// On top of the texture each subject carries a resting offset per AU: a
// constant N(0, resting_offset_std^2) multiple of that AU's shape at its
// position. Both parts are scaled by identity_signature_strength.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iatlab/json_util.hpp"
#include "iatlab/rng.hpp"
#include "iatlab/tensor.hpp"

namespace iat {

struct BlobPosition {
  Index row = 0;  // patch-grid row
  Index col = 0;  // patch-grid column
  bool operator==(const BlobPosition&) const = default;
};

struct DatasetSpec {
  Index n_subjects = 41;
  Index images_per_subject = 100;
  Index image_size = 16;
  Index blob_size = 4;
  Index n_au = 12;
  std::vector<BlobPosition> au_blob_positions = default_blob_positions();
  double identity_signature_strength = 0.15;
  double pixel_noise_std = 0.15;
  double amplitude_min = 0.5;
  double amplitude_max = 1.0;
  std::string signature_kind = "tiled";  // "white" | "tiled"
  std::string au_shape = "dct";          // "bump" (shared) | "dct" (one pattern per AU)
  double resting_offset_std = 1.75;
  std::vector<double> au_prior = default_au_prior();
  std::uint64_t seed = 1;

  static std::vector<BlobPosition> default_blob_positions();
  static std::vector<double> default_au_prior();

  Index size() const { return n_subjects * images_per_subject; }
  /// Throws ConfigError on overlapping/out-of-bounds blobs or bad probabilities.
  void validate() const;
};

Json to_json(const DatasetSpec& spec);
/// Strict: unknown keys are rejected. Missing keys keep their defaults.
DatasetSpec dataset_spec_from_json(const Json& j, const std::string& path = "data");

struct Dataset {
  DatasetSpec spec;
  Tensor<float> images;                  // [N, S, S, 1]
  std::vector<std::uint8_t> au_labels;   // N * n_au, row-major
  std::vector<int> subject_ids;          // N
  std::vector<int> sample_index;         // N, index within the subject

  Index size() const { return static_cast<Index>(subject_ids.size()); }
  Index n_au() const { return spec.n_au; }
  /// Gathers rows into a [B,S,S,1] batch.
  Tensor<float> images_at(std::span<const Index> rows) const;
  /// Gathers AU targets as a [B, n_au] 0/1 tensor.
  Tensor<float> labels_at(std::span<const Index> rows) const;
};

/// Per-sample random draw: AU activations and blob amplitudes (0 when inactive).
struct SampleDraw {
  std::vector<std::uint8_t> labels;
  std::vector<double> amplitudes;
};

/// The fixed blob shape: a separable bump filling one blob cell, peak 1.
std::vector<double> blob_shape(Index blob_size);

/// Shape of AU a under spec.au_shape. "dct" gives the a-th non-constant 2-D
/// DCT-II basis pattern (ordered by u+v, then u), scaled to max |value| 1.
std::vector<double> au_shape(const DatasetSpec& spec, Index a);

/// Identity texture of one subject (S*S values, unit scale).
std::vector<double> identity_signature(const DatasetSpec& spec, int subject);

SampleDraw draw_sample(const DatasetSpec& spec, Rng& rng);

/// Renders one S*S image: strength * signature + blobs + noise (drawn from rng).
std::vector<float> render_image(const DatasetSpec& spec, std::span<const double> signature, const SampleDraw& draw,
                                Rng& noise_rng);

/// Pure function of spec: equal specs give bit-identical datasets.
Dataset generate_dataset(const DatasetSpec& spec);

// Splits ----------------------------------------------------------------------

struct FoldSplit {
  int k = 3;
  std::vector<int> assignment;  // subject -> fold

  std::vector<int> test_subjects(int fold) const;
  std::vector<int> train_subjects(int fold) const;
};

/// Shuffles subjects with seed and deals them round-robin into k folds.
FoldSplit split_subject_exclusive(Index n_subjects, int k, std::uint64_t seed);
FoldSplit split_subject_exclusive(const Dataset& dataset, int k, std::uint64_t seed);

/// Dataset rows whose subject is in subjects, in dataset order.
std::vector<Index> rows_for_subjects(const Dataset& dataset, std::span<const int> subjects);

struct ProbeSplit {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// Per subject, draws disjoint random sets of train_per_subject and
/// test_per_subject rows.
ProbeSplit probe_split(const Dataset& dataset, Index train_per_subject, Index test_per_subject, std::uint64_t seed);

// Serialization ---------------------------------------------------------------

/// Writes manifest.json (spec, counts, checksums) plus images.bin,
/// au_labels.bin and subjects.bin in the flat tensor format.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
/// Loads and verifies checksums; DataError on mismatch.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace iat
