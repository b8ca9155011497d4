// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/train.hpp"

#include <algorithm>
#include <cmath>

namespace iat {

namespace {
constexpr std::uint64_t kBackboneInitStream = 10;
constexpr std::uint64_t kTaskHeadInitStream = 11;
constexpr std::uint64_t kIdHeadInitStream = 12;
constexpr std::uint64_t kShuffleStream = 13;
}  // namespace

void TrainConfig::validate() const {
  backbone.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train.lambda must be >= 0");
  if (id_head_depth < 1 || id_head_depth > 3) throw ConfigError("train.id_head_depth must be 1, 2 or 3");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("train.warmup_epochs must lie in [0, epochs]");
  if (n_folds < 2) throw ConfigError("train.n_folds must be >= 2");
  if (fold < 0 || fold >= n_folds) throw ConfigError("train.fold must lie in [0, n_folds)");
  if (convergence.patience < 1 || !(convergence.delta >= 0.0)) throw ConfigError("train.convergence is invalid");
  if (!(optim.lr >= 0.0) || !(optim.weight_decay >= 0.0)) throw ConfigError("train.optim values must be >= 0");
}

Json to_json(const BackboneConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"embed_dim", c.embed_dim},   {"depth", c.depth},           {"n_heads", c.n_heads},
          {"mlp_ratio", c.mlp_ratio},   {"ln_eps", c.ln_eps}};
}

BackboneConfig backbone_config_from_json(const Json& j, const std::string& path) {
  BackboneConfig c;
  StrictObject o(j, path);
  o.read("image_size", c.image_size);
  o.read("patch_size", c.patch_size);
  o.read("channels", c.channels);
  o.read("embed_dim", c.embed_dim);
  o.read("depth", c.depth);
  o.read("n_heads", c.n_heads);
  o.read("mlp_ratio", c.mlp_ratio);
  o.read("ln_eps", c.ln_eps);
  o.finish();
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["iat_enabled"] = c.iat_enabled;
  j["lambda"] = c.lambda;
  j["id_head_depth"] = c.id_head_depth;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["warmup_epochs"] = c.warmup_epochs;
  j["optim"] = {{"lr", c.optim.lr},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay}};
  j["n_folds"] = c.n_folds;
  j["fold"] = c.fold;
  j["split_seed"] = c.split_seed;
  j["seed"] = c.seed;
  j["convergence"] = {{"delta", c.convergence.delta}, {"patience", c.convergence.patience}};
  j["backbone"] = to_json(c.backbone);
  j["keep_snapshots"] = c.keep_snapshots;
  return j;
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
  TrainConfig c;
  StrictObject o(j, path);
  o.read("iat_enabled", c.iat_enabled);
  o.read("lambda", c.lambda);
  o.read("id_head_depth", c.id_head_depth);
  o.read("epochs", c.epochs);
  o.read("batch_size", c.batch_size);
  o.read("warmup_epochs", c.warmup_epochs);
  if (const Json* opt = o.child("optim")) {
    StrictObject oo(*opt, path + ".optim");
    oo.read("lr", c.optim.lr);
    oo.read("beta1", c.optim.beta1);
    oo.read("beta2", c.optim.beta2);
    oo.read("eps", c.optim.eps);
    oo.read("weight_decay", c.optim.weight_decay);
    oo.finish();
  }
  o.read("n_folds", c.n_folds);
  o.read("fold", c.fold);
  o.read("split_seed", c.split_seed);
  o.read("seed", c.seed);
  if (const Json* conv = o.child("convergence")) {
    StrictObject oc(*conv, path + ".convergence");
    oc.read("delta", c.convergence.delta);
    oc.read("patience", c.convergence.patience);
    oc.finish();
  }
  if (const Json* bb = o.child("backbone")) c.backbone = backbone_config_from_json(*bb, path + ".backbone");
  o.read("keep_snapshots", c.keep_snapshots);
  o.finish();
  return c;
}

Json to_json(const LossRecord& r) {
  Json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["l_au"] = r.l_au;
  j["l_id"] = r.l_id;
  j["macro_f1"] = r.macro_f1;
  j["per_au_f1"] = r.per_au_f1;
  j["degenerate"] = r.degenerate;
  return j;
}

Convergence detect_convergence(std::span<const double> f1, double delta, int patience) {
  if (f1.empty()) throw ContractError("detect_convergence: empty series");
  if (patience < 1) throw ConfigError("detect_convergence: patience must be >= 1");
  const auto n = static_cast<int>(f1.size());
  if (n < patience) return {n - 1, true};
  for (int e = 0; e < n; ++e) {
    bool plateau = true;
    for (int j = e + 1; j <= std::min(n - 1, e + patience); ++j) {
      if (f1[static_cast<std::size_t>(j)] > f1[static_cast<std::size_t>(e)] + delta) {
        plateau = false;
        break;
      }
    }
    if (plateau) return {e, false};
  }
  return {n - 1, false};
}

template <typename Scalar>
JointOutput<Scalar> forward_joint(const Bound<Scalar>& p, const BackboneConfig& cfg, Var<Scalar> images,
                                  const Tensor<Scalar>& au_targets, std::span<const int> id_labels, double lambda,
                                  int id_head_depth, bool iat_enabled, bool reverse) {
  JointOutput<Scalar> out;
  out.features = backbone_forward(p, cfg, images);
  out.au_logits = task_head_forward(p, out.features);
  out.l_au = bce_multilabel(out.au_logits, au_targets);
  out.total = out.l_au;
  if (iat_enabled) {
    if (static_cast<Index>(id_labels.size()) != images.dim(0)) {
      throw DataError("identity labels missing for the batch (" + std::to_string(id_labels.size()) + " of " +
                      std::to_string(images.dim(0)) + ")");
    }
    const Var<Scalar> f = reverse ? grad_reverse(out.features, lambda) : out.features;
    out.id_logits = id_head_forward(p, f, id_head_depth);
    out.l_id = cross_entropy(*out.id_logits, id_labels);
    out.total = out.l_au + *out.l_id;
  }
  return out;
}

template JointOutput<float> forward_joint(const Bound<float>&, const BackboneConfig&, Var<float>, const Tensor<float>&,
                                          std::span<const int>, double, int, bool, bool);
template JointOutput<double> forward_joint(const Bound<double>&, const BackboneConfig&, Var<double>,
                                           const Tensor<double>&, std::span<const int>, double, int, bool, bool);

ModelParams<float> init_model(const TrainConfig& cfg, Index n_au, Index n_id_classes) {
  ModelParams<float> params;
  Rng backbone_rng(cfg.seed, {kBackboneInitStream});
  init_backbone(params, cfg.backbone, backbone_rng);
  Rng task_rng(cfg.seed, {kTaskHeadInitStream});
  init_task_head(params, cfg.backbone.embed_dim, n_au, task_rng);
  if (cfg.iat_enabled) {
    Rng id_rng(cfg.seed, {kIdHeadInitStream});
    init_id_head(params, cfg.backbone.embed_dim, n_id_classes, cfg.id_head_depth, id_rng);
  }
  return params;
}

std::vector<double> TrainResult::heldout_f1() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.heldout.macro_f1);
  return out;
}

double TrainResult::converged_f1() const {
  return epochs.at(static_cast<std::size_t>(convergence.index)).heldout.macro_f1;
}

double TrainResult::peak_f1() const {
  double best = 0.0;
  for (const auto& e : epochs) best = std::max(best, e.heldout.macro_f1);
  return best;
}

double TrainResult::converged_id_loss() const {
  return epochs.at(static_cast<std::size_t>(convergence.index)).train.l_id;
}

LossRecord evaluate_au(const ModelParams<float>& params, const BackboneConfig& cfg, const Dataset& dataset,
                       std::span<const Index> rows, Index batch_size) {
  LossRecord rec;
  std::vector<std::uint8_t> preds, targets;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    const auto batch = rows.subspan(start, end - start);
    Tape<float> tape(false);
    Bound<float> p(tape, params);
    const Tensor<float> y = dataset.labels_at(batch);
    const Var<float> logits = task_head_forward(p, backbone_forward(p, cfg, tape.constant(dataset.images_at(batch))));
    loss_sum += static_cast<double>(bce_multilabel(logits, y).value()[0]) * static_cast<double>(batch.size());
    const auto pb = threshold_logits(logits.value());
    preds.insert(preds.end(), pb.begin(), pb.end());
    for (float v : y.values()) targets.push_back(v != 0.0f ? 1 : 0);
  }
  const F1Result f1 = f1_metrics(preds, targets, dataset.n_au());
  rec.l_au = loss_sum / static_cast<double>(rows.size());
  rec.macro_f1 = f1.macro;
  rec.per_au_f1 = f1.per_class;
  rec.degenerate = f1.degenerate;
  return rec;
}

TrainResult train(const TrainConfig& cfg, const Dataset& dataset, const FoldSplit& split,
                  const ModelParams<float>* init_backbone, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.backbone.image_size != dataset.spec.image_size || cfg.backbone.channels != 1) {
    throw ConfigError("backbone image geometry does not match the dataset");
  }
  if (split.k != cfg.n_folds || static_cast<Index>(split.assignment.size()) != dataset.spec.n_subjects) {
    throw ConfigError("fold split does not match the dataset / n_folds");
  }
  TrainResult result;
  result.train_subjects = split.train_subjects(cfg.fold);
  result.test_subjects = split.test_subjects(cfg.fold);
  const std::vector<Index> train_rows = rows_for_subjects(dataset, result.train_subjects);
  const std::vector<Index> test_rows = rows_for_subjects(dataset, result.test_subjects);
  std::vector<int> local_id(static_cast<std::size_t>(dataset.spec.n_subjects), -1);
  for (std::size_t k = 0; k < result.train_subjects.size(); ++k) {
    local_id[static_cast<std::size_t>(result.train_subjects[k])] = static_cast<int>(k);
  }

  ModelParams<float> params = init_model(cfg, dataset.n_au(), static_cast<Index>(result.train_subjects.size()));
  if (init_backbone != nullptr) {
    for (const auto& name : params.names(ParamGroup::backbone)) {
      if (!init_backbone->contains(name) || init_backbone->at(name).shape() != params.at(name).shape()) {
        throw CheckpointError("initial backbone is missing or mis-shaped at '" + name + "'");
      }
      params.at(name) = init_backbone->at(name);
    }
  }

  AdamW<float> opt(cfg.optim);
  const auto batches_per_epoch =
      static_cast<std::int64_t>((train_rows.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                static_cast<std::size_t>(cfg.batch_size));
  const std::int64_t total_steps = batches_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = batches_per_epoch * cfg.warmup_epochs;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order = train_rows;
    Rng shuffle_rng(cfg.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);

    double au_sum = 0.0, id_sum = 0.0;
    std::vector<std::uint8_t> preds, targets;
    for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t start = static_cast<std::size_t>(b * cfg.batch_size);
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const Index> batch(order.data() + start, end - start);
      std::vector<int> ids;
      for (Index r : batch) ids.push_back(local_id[static_cast<std::size_t>(dataset.subject_ids[static_cast<std::size_t>(r)])]);
      const Tensor<float> y = dataset.labels_at(batch);
      try {
        Tape<float> tape;
        Bound<float> p(tape, params);
        const auto out = forward_joint(p, cfg.backbone, tape.constant(dataset.images_at(batch)), y, ids, cfg.lambda,
                                       cfg.id_head_depth, cfg.iat_enabled);
        const GradientMap<float> grads = backward(out.total, p.trainable());
        opt.step(params, grads, lr_schedule(step, warmup_steps, total_steps, cfg.optim.lr));
        au_sum += static_cast<double>(out.l_au.value()[0]) * static_cast<double>(batch.size());
        if (out.l_id) id_sum += static_cast<double>(out.l_id->value()[0]) * static_cast<double>(batch.size());
        const auto pb = threshold_logits(out.au_logits.value());
        preds.insert(preds.end(), pb.begin(), pb.end());
        for (float v : y.values()) targets.push_back(v != 0.0f ? 1 : 0);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b) + ": " + e.what());
      }
      ++step;
    }

    EpochMetrics m;
    const F1Result train_f1 = f1_metrics(preds, targets, dataset.n_au());
    m.train.epoch = epoch + 1;
    m.train.split = "train";
    m.train.l_au = au_sum / static_cast<double>(train_rows.size());
    m.train.l_id = id_sum / static_cast<double>(train_rows.size());
    m.train.macro_f1 = train_f1.macro;
    m.train.per_au_f1 = train_f1.per_class;
    m.train.degenerate = train_f1.degenerate;
    m.heldout = evaluate_au(params, cfg.backbone, dataset, test_rows);
    m.heldout.epoch = epoch + 1;
    m.heldout.split = "heldout";
    result.epochs.push_back(m);
    if (cfg.keep_snapshots) result.snapshots.push_back(params.subset({ParamGroup::backbone}));
    if (on_epoch) on_epoch(m);
  }

  const auto f1 = result.heldout_f1();
  result.convergence = detect_convergence(f1, cfg.convergence.delta, cfg.convergence.patience);
  result.final_params = std::move(params);
  return result;
}

}  // namespace iat
