// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Joint AU + identity training with gradient reversal.
//
//   f         = backbone(x)
//   au_logits = task_head(f)
//   id_logits = id_head(grad_reverse(f, lambda))
//   loss      = L_au + L_id
//
// One backward pass over loss yields dL_au/d(task head), dL_id/d(id head)
// and dL_au/d(backbone) - lambda * dL_id/d(backbone); a single optimizer step
// on all of them realizes the min-max game with simultaneous updates.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iatlab/data.hpp"
#include "iatlab/json_util.hpp"
#include "iatlab/metrics.hpp"
#include "iatlab/nn.hpp"
#include "iatlab/optim.hpp"

namespace iat {

struct ConvergenceConfig {
  double delta = 0.0005;
  int patience = 5;
};

struct TrainConfig {
  bool iat_enabled = true;
  double lambda = 2.0;
  int id_head_depth = 1;
  int epochs = 30;
  Index batch_size = 64;
  int warmup_epochs = 2;
  AdamWConfig optim{};
  int n_folds = 3;
  int fold = 1;
  std::uint64_t split_seed = 7;
  std::uint64_t seed = 1;
  ConvergenceConfig convergence{};
  BackboneConfig backbone{};
  bool keep_snapshots = true;

  void validate() const;
};

Json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const Json& j, const std::string& path = "backbone");
Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, const std::string& path = "train");

/// One row of the metrics series.
struct LossRecord {
  int epoch = 0;  // 1-based: number of completed epochs
  std::string split;  // "train" or "heldout"
  double l_au = 0.0;
  double l_id = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_au_f1;
  std::vector<bool> degenerate;
};

Json to_json(const LossRecord& r);

struct EpochMetrics {
  LossRecord train;
  LossRecord heldout;
};

struct Convergence {
  int index = 0;         // position in the series (0-based)
  bool warning = false;  // series shorter than patience
};

/// Earliest position e such that none of the next `patience` values exceeds
/// f1[e] + delta (the look-ahead window is truncated at the end of the
/// series). Series shorter than patience return the last position with the
/// warning flag set.
Convergence detect_convergence(std::span<const double> f1, double delta, int patience);

template <typename Scalar>
struct JointOutput {
  Var<Scalar> features;
  Var<Scalar> au_logits;
  Var<Scalar> l_au;
  std::optional<Var<Scalar>> id_logits;
  std::optional<Var<Scalar>> l_id;
  /// l_au + l_id when the identity branch is present, else l_au.
  Var<Scalar> total;
};

/// Builds the two-head graph. With iat_enabled the identity branch is added
/// behind grad_reverse(f, lambda); reverse=false replaces the reversal node by
/// the identity (used to take the graph apart in tests).
template <typename Scalar>
JointOutput<Scalar> forward_joint(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images,
                                  const Tensor<Scalar>& au_targets, std::span<const int> id_labels, double lambda,
                                  int id_head_depth, bool iat_enabled, bool reverse = true);

/// Fresh parameters for a run: backbone, task head and (if enabled) id head,
/// each from its own RNG stream so that the id head draws never shift the
/// other groups.
ModelParams<float> init_model(const TrainConfig& cfg, Index n_au, Index n_id_classes);

struct TrainResult {
  ModelParams<float> final_params;
  /// Backbone group after each epoch (index e = after epoch e+1).
  std::vector<ModelParams<float>> snapshots;
  std::vector<EpochMetrics> epochs;
  Convergence convergence;
  std::vector<int> train_subjects;  // id-head class k = train_subjects[k]
  std::vector<int> test_subjects;

  std::vector<double> heldout_f1() const;
  /// Held-out macro-F1 at the convergence epoch.
  double converged_f1() const;
  double peak_f1() const;
  /// Mean training-set identity loss at the convergence epoch.
  double converged_id_loss() const;
  /// 1-based convergence epoch.
  int convergence_epoch() const { return convergence.index + 1; }
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains on the training folds of split and evaluates on the held-out fold
/// after every epoch. init_backbone, when given, replaces the freshly
/// initialized backbone group (shapes must match).
TrainResult train(const TrainConfig& cfg, const Dataset& dataset, const FoldSplit& split,
                  const ModelParams<float>* init_backbone = nullptr, const EpochCallback& on_epoch = {});

/// Evaluates AU predictions of params on rows: returns mean BCE and F1.
LossRecord evaluate_au(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                       std::span<const Index> rows, Index batch_size = 256);

}  // namespace iat
