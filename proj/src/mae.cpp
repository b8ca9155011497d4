// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "iatlab/mae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "iatlab/patch.hpp"

namespace iat {

namespace {
constexpr std::uint64_t kBackboneInitStream = 10;
constexpr std::uint64_t kDecoderInitStream = 20;
constexpr std::uint64_t kMaskStream = 21;
constexpr std::uint64_t kShuffleStream = 22;
constexpr std::uint64_t kEvalMaskStream = 23;
constexpr Index kEvalBatch = 128;

Index masked_count(Index total, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
  const auto m = static_cast<Index>(std::llround(ratio * static_cast<double>(total)));
  if (m <= 0 || m >= total) {
    throw ConfigError("mask ratio " + std::to_string(ratio) + " masks " + std::to_string(m) + " of " +
                      std::to_string(total) + " tokens");
  }
  return m;
}

std::vector<MaskPlan> draw_plans(Index count, Index total, double ratio, Rng& rng) {
  std::vector<MaskPlan> plans;
  plans.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) plans.push_back(random_mask(total, ratio, rng));
  return plans;
}
}  // namespace

std::vector<std::uint8_t> MaskPlan::flags() const {
  std::vector<std::uint8_t> f(static_cast<std::size_t>(total), 0);
  for (Index t : masked) f[static_cast<std::size_t>(t)] = 1;
  return f;
}

MaskPlan random_mask(Index total, double ratio, Rng& rng) {
  if (total < 2) throw ConfigError("random_mask needs at least 2 tokens");
  const Index m = masked_count(total, ratio);
  std::vector<Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Index{0});
  rng.shuffle(order);
  MaskPlan plan;
  plan.total = total;
  plan.masked.assign(order.begin(), order.begin() + m);
  plan.visible.assign(order.begin() + m, order.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

void MaeConfig::validate() const {
  backbone.validate();
  decoder.validate();
  masked_count(backbone.tokens(), mask_ratio);
  if (epochs < 1) throw ConfigError("pretrain.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("pretrain.warmup_epochs must lie in [0, epochs]");
  if (n_images < 0) throw ConfigError("pretrain.n_images must be >= 0");
}

Json to_json(const MaeConfig& c) {
  Json j;
  j["mask_ratio"] = c.mask_ratio;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["warmup_epochs"] = c.warmup_epochs;
  j["optim"] = {{"lr", c.optim.lr},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay}};
  j["n_images"] = c.n_images;
  j["seed"] = c.seed;
  j["decoder"] = {{"embed_dim", c.decoder.embed_dim},
                  {"depth", c.decoder.depth},
                  {"n_heads", c.decoder.n_heads},
                  {"mlp_ratio", c.decoder.mlp_ratio}};
  return j;
}

MaeConfig mae_config_from_json(const Json& j, const std::string& path) {
  MaeConfig c;
  StrictObject o(j, path);
  o.read("mask_ratio", c.mask_ratio);
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
  o.read("n_images", c.n_images);
  o.read("seed", c.seed);
  if (const Json* dec = o.child("decoder")) {
    StrictObject od(*dec, path + ".decoder");
    od.read("embed_dim", c.decoder.embed_dim);
    od.read("depth", c.decoder.depth);
    od.read("n_heads", c.decoder.n_heads);
    od.read("mlp_ratio", c.decoder.mlp_ratio);
    od.finish();
  }
  o.finish();
  return c;
}

template <typename Scalar>
MaeOutput<Scalar> mae_forward(const Bound<Scalar>& p, const BackboneConfig& enc, const DecoderConfig& dec,
                              Var<Scalar> images, std::span<const MaskPlan> plans) {
  const Index batch = images.dim(0);
  const Index total = enc.tokens();
  if (static_cast<Index>(plans.size()) != batch) throw DimensionError("mae_forward: one mask plan per sample");
  const Index n_visible = static_cast<Index>(plans.front().visible.size());
  std::vector<Index> visible;
  std::vector<std::uint8_t> flags;
  for (const auto& plan : plans) {
    if (plan.total != total || static_cast<Index>(plan.visible.size()) != n_visible) {
      throw DimensionError("mae_forward: mask plans disagree on token counts");
    }
    visible.insert(visible.end(), plan.visible.begin(), plan.visible.end());
    const auto f = plan.flags();
    flags.insert(flags.end(), f.begin(), f.end());
  }

  MaeOutput<Scalar> out;
  const Var<Scalar> kept = gather_tokens(embed_patches(p, enc, images), visible, n_visible);
  out.encoded = encode_tokens(p, enc, kept);

  Var<Scalar> x = linear(p, "decoder.embed", reshape(out.encoded, {batch * n_visible, enc.embed_dim}));
  x = reshape(x, {batch, n_visible, dec.embed_dim});
  x = scatter_tokens(x, visible, p["decoder.mask_token"], total) + p["decoder.pos_embed"];
  x = reshape(x, {batch * total, dec.embed_dim});
  for (Index i = 0; i < dec.depth; ++i) {
    x = transformer_block(p, "decoder.blocks." + std::to_string(i), x, batch, total, dec.n_heads);
  }
  x = layer_norm(x, p["decoder.norm.g"], p["decoder.norm.b"], enc.ln_eps);
  out.pred = reshape(linear(p, "decoder.pred", x), {batch, total, enc.patch_dim()});
  out.loss = masked_mse(out.pred, patchify(images.value(), enc.patch_size), flags);
  return out;
}

template MaeOutput<float> mae_forward(const Bound<float>&, const BackboneConfig&, const DecoderConfig&, Var<float>,
                                      std::span<const MaskPlan>);
template MaeOutput<double> mae_forward(const Bound<double>&, const BackboneConfig&, const DecoderConfig&, Var<double>,
                                       std::span<const MaskPlan>);

double mae_step(ModelParams<float>& params, const MaeConfig& cfg, const Tensor<float>& images,
                std::span<const MaskPlan> plans, AdamW<float>& opt, double lr) {
  if (!params.has_group(ParamGroup::decoder)) throw ConfigError("mae_step: decoder parameters missing");
  Tape<float> tape;
  Bound<float> p(tape, params);
  const auto out = mae_forward(p, cfg.backbone, cfg.decoder, tape.constant(images), plans);
  const GradientMap<float> grads = backward(out.loss, p.trainable());
  opt.step(params, grads, lr);
  return static_cast<double>(out.loss.value()[0]);
}

ModelParams<float> init_mae(const MaeConfig& cfg) {
  ModelParams<float> params;
  Rng enc_rng(cfg.seed, {kBackboneInitStream});
  init_backbone(params, cfg.backbone, enc_rng);
  Rng dec_rng(cfg.seed, {kDecoderInitStream});
  init_decoder(params, cfg.backbone, cfg.decoder, dec_rng);
  return params;
}

PretrainResult pretrain(const MaeConfig& cfg, const Dataset& dataset, const PretrainCallback& on_epoch) {
  cfg.validate();
  if (cfg.backbone.image_size != dataset.spec.image_size || cfg.backbone.channels != 1) {
    throw ConfigError("backbone image geometry does not match the dataset");
  }
  const Index n = cfg.n_images == 0 ? dataset.size() : std::min(cfg.n_images, dataset.size());
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});

  ModelParams<float> params = init_mae(cfg);
  AdamW<float> opt(cfg.optim);
  const Index total = cfg.backbone.tokens();

  Rng eval_rng(cfg.seed, {kEvalMaskStream});
  const std::vector<MaskPlan> eval_plans = draw_plans(n, total, cfg.mask_ratio, eval_rng);
  auto evaluate = [&] {
    double sum = 0.0;
    for (Index start = 0; start < n; start += kEvalBatch) {
      const Index end = std::min(n, start + kEvalBatch);
      const std::span<const Index> batch(rows.data() + start, static_cast<std::size_t>(end - start));
      Tape<float> tape(false);
      Bound<float> p(tape, params);
      const auto out = mae_forward(p, cfg.backbone, cfg.decoder, tape.constant(dataset.images_at(batch)),
                                   std::span(eval_plans).subspan(static_cast<std::size_t>(start), batch.size()));
      sum += static_cast<double>(out.loss.value()[0]) * static_cast<double>(batch.size());
    }
    return sum / static_cast<double>(n);
  };

  PretrainResult result;
  result.eval_loss.push_back(evaluate());
  const Index per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = per_epoch * cfg.warmup_epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order = rows;
    Rng shuffle_rng(cfg.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);
    Rng mask_rng(cfg.seed, {kMaskStream, static_cast<std::uint64_t>(epoch)});
    double sum = 0.0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index end = std::min(n, start + cfg.batch_size);
      const std::span<const Index> batch(order.data() + start, static_cast<std::size_t>(end - start));
      const auto plans = draw_plans(end - start, total, cfg.mask_ratio, mask_rng);
      try {
        const double loss = mae_step(params, cfg, dataset.images_at(batch), plans, opt,
                                     lr_schedule(step, warmup_steps, total_steps, cfg.optim.lr));
        sum += loss * static_cast<double>(end - start);
      } catch (const NumericError& e) {
        throw NumericError("pretrain epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }
      ++step;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(n));
    result.eval_loss.push_back(evaluate());
    if (on_epoch) on_epoch(epoch + 1, result.epoch_loss.back(), result.eval_loss.back());
  }
  result.backbone = params.subset({ParamGroup::backbone});
  return result;
}

}  // namespace iat
