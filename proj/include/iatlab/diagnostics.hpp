// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Analysis instruments: identity linear probing, lambda / id-head sweeps,
// feature export, benchmark calibration and report rendering.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iatlab/data.hpp"
#include "iatlab/train.hpp"

namespace iat {

/// Frozen backbone features f for rows: [N, D].
Tensor<float> extract_features(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                               std::span<const Index> rows, Index batch_size = 256);

struct ProbeConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int max_epochs = 300;
  /// Stop once the best epoch loss improved by less than rel_tol (relative)
  /// over the last `patience` epochs.
  int patience = 20;
  double rel_tol = 1e-4;
  Index batch_size = 256;
  Index train_per_subject = 70;
  Index test_per_subject = 30;
  std::uint64_t seed = 3;

  void validate() const;
};

Json to_json(const ProbeConfig& cfg);
ProbeConfig probe_config_from_json(const Json& j, const std::string& path = "probe");

struct ProbeResult {
  int epoch = 0;  // checkpoint epoch (0 = initialization)
  double accuracy = 0.0;
  double chance = 0.0;
  int probe_epochs = 0;
  double train_loss = 0.0;
};

/// Trains a fresh linear map D -> n_subjects on standardized frozen features
/// of the probe-train rows and reports accuracy on the probe-test rows.
/// shuffle_labels permutes identity labels (negative control).
ProbeResult linear_probe(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                         const ProbeSplit& split, const ProbeConfig& probe, bool shuffle_labels = false);

/// One probe per available snapshot; snapshots[e] holds the backbone after
/// epoch e+1, nullopt marks a missing epoch (skipped).
std::vector<ProbeResult> probe_curve(std::span<const std::optional<ModelParams<float>>> snapshots,
                                     const BackboneConfig& cfg, const Dataset& dataset, const ProbeConfig& probe);

std::string probe_csv(std::span<const ProbeResult> results);

// Sweeps ----------------------------------------------------------------------

enum class SweepKind { lambda, id_head };

const std::vector<double>& default_lambda_grid();
const std::vector<double>& default_depth_grid();

struct SweepRun {
  double value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double converged_f1 = 0.0;
  double peak_f1 = 0.0;
  int convergence_epoch = 0;
  bool convergence_warning = false;
  double converged_id_loss = 0.0;
  std::vector<double> heldout_f1;
  std::vector<double> train_id_loss;
};

struct SweepRow {
  double value = 0.0;
  bool complete = true;
  int n_runs = 0;
  double mean_f1 = 0.0;
  double se_f1 = 0.0;
  double mean_peak_f1 = 0.0;
  double mean_convergence_epoch = 0.0;
  double mean_id_loss = 0.0;
};

struct SweepTable {
  SweepKind kind = SweepKind::lambda;
  std::vector<SweepRow> rows;  // in value order as given
  std::vector<SweepRun> runs;  // value-major, then seed order
};

/// Trains base with the swept field set to each value, for every seed
/// (seed overrides base.seed). Runs execute on up to `jobs` threads; results
/// are merged in (value, seed) order so the table does not depend on jobs.
SweepTable run_sweep(const TrainConfig& base, SweepKind kind, std::span<const double> values,
                     std::span<const std::uint64_t> seeds, const Dataset& dataset, int jobs = 1,
                     const ModelParams<float>* init_backbone = nullptr);

std::string sweep_csv(const SweepTable& table);
std::string sweep_runs_jsonl(const SweepTable& table);
std::string render_sweep_table(const SweepTable& table);

// Feature export --------------------------------------------------------------

/// CSV with header subject_id,au_1..au_n,f_1..f_D over the first
/// `max_subjects` subject ids (0 = all), rows in dataset order.
std::string export_features_csv(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                                int max_subjects = 0);

// Calibration -----------------------------------------------------------------

struct CalibrationPoint {
  double strength = 0.0;
  double accuracy = 0.0;
  double heldout_f1 = 0.0;
};

struct CalibrationResult {
  DatasetSpec spec;
  std::vector<CalibrationPoint> trace;
  bool in_band = false;
};

/// Grid search over identity_signature_strength: generates the dataset,
/// trains a baseline (iat disabled) and probes it; picks the strength whose
/// probe accuracy is nearest the band [band_lo, band_hi].
CalibrationResult calibrate_benchmark(const DatasetSpec& base, std::span<const double> strengths,
                                      const TrainConfig& train_cfg, const ProbeConfig& probe, double band_lo = 0.6,
                                      double band_hi = 0.9);

std::string calibration_csv(const CalibrationResult& result);

}  // namespace iat
