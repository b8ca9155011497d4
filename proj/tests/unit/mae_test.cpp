// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>

#include "../common/op_suite.hpp"
#include "doctest.h"
#include "iatlab/mae.hpp"
#include "iatlab/patch.hpp"

using namespace iat;
using iat::testing::randn;

TEST_CASE("patchify layout") {
  Tensor<double> img(Shape{1, 16, 16, 1});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const Tensor<double> tok = patchify(img, 4);
  CHECK(tok.shape() == Shape{1, 16, 16});
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x) CHECK(tok[y * 4 + x] == img[y * 16 + x]);
  // Token 5 is grid cell (1,1).
  CHECK(tok[5 * 16] == img[4 * 16 + 4]);
  const Tensor<double> back = unpatchify(tok, 4, 1);
  CHECK(back.shape() == img.shape());
  for (Index i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("random mask counts and determinism") {
  Rng a(4, {1}), b(4, {1});
  const MaskPlan p = random_mask(16, 0.75, a);
  const MaskPlan q = random_mask(16, 0.75, b);
  CHECK(p.masked.size() == 12u);
  CHECK(p.visible.size() == 4u);
  CHECK(p.masked == q.masked);
  CHECK(std::is_sorted(p.masked.begin(), p.masked.end()));
  std::vector<Index> all = p.masked;
  all.insert(all.end(), p.visible.begin(), p.visible.end());
  std::sort(all.begin(), all.end());
  for (Index i = 0; i < 16; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
  Rng c(1);
  CHECK_THROWS_AS(random_mask(16, 1.0, c), ConfigError);
  CHECK_THROWS_AS(random_mask(16, 0.01, c), ConfigError);
}

TEST_CASE("each token is masked at the stated frequency") {
  Rng rng(8, {3});
  const int draws = 4000;
  std::vector<int> hits(16);
  for (int d = 0; d < draws; ++d)
    for (Index m : random_mask(16, 0.75, rng).masked) ++hits[static_cast<std::size_t>(m)];
  const double se = std::sqrt(0.75 * 0.25 / draws);
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(draws) - 0.75) <= 3 * se);
}

TEST_CASE("complementary plans cover every token") {
  Rng rng(2);
  const MaskPlan p = random_mask(16, 0.5, rng);
  MaskPlan q;
  q.total = 16;
  q.masked = p.visible;
  q.visible = p.masked;
  const auto fp = p.flags();
  const auto fq = q.flags();
  for (std::size_t i = 0; i < 16; ++i) CHECK(fp[i] + fq[i] == 1);
}

namespace {

struct MaeFixture {
  MaeConfig cfg;
  ModelParams<double> params;
  Tensor<double> images = randn({2, 16, 16, 1}, 21);
  std::vector<MaskPlan> plans;

  MaeFixture() {
    params = init_mae(cfg).cast<double>();
    Rng rng(3);
    plans = {random_mask(16, 0.75, rng), random_mask(16, 0.75, rng)};
  }

  MaeOutput<double> run(Tape<double>& tape, const Tensor<double>& img) const {
    Bound<double> b(tape, params);
    return mae_forward(b, cfg.backbone, cfg.decoder, tape.constant(img), plans);
  }
};

}  // namespace

TEST_CASE("encoder sees only visible tokens") {
  MaeFixture f;
  Tape<double> t1(false), t2(false);
  const auto base = f.run(t1, f.images).encoded.value();
  Tensor<double> scrambled = f.images;
  for (std::size_t s = 0; s < 2; ++s)
    for (Index t : f.plans[s].masked) {
      const Index gy = t / 4, gx = t % 4;
      for (Index y = 0; y < 4; ++y)
        for (Index x = 0; x < 4; ++x) scrambled[static_cast<Index>(s) * 256 + (gy * 4 + y) * 16 + gx * 4 + x] = 1e3;
    }
  const auto again = f.run(t2, scrambled).encoded.value();
  CHECK(base.shape() == Shape{2, 4, 32});
  for (Index i = 0; i < base.size(); ++i) CHECK(again[i] == base[i]);
}

TEST_CASE("loss ignores the targets of visible tokens") {
  MaeFixture f;
  Tape<double> t0(false);
  const auto out = f.run(t0, f.images);
  const Tensor<double> pred = out.pred.value();
  std::vector<std::uint8_t> flags;
  for (const auto& p : f.plans) {
    const auto fl = p.flags();
    flags.insert(flags.end(), fl.begin(), fl.end());
  }
  Tensor<double> target = patchify(f.images, 4);
  Tape<double> tape(false);
  const double l0 = masked_mse(tape.constant(pred), target, flags).value()[0];
  CHECK(l0 == out.loss.value()[0]);
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i] == 0)
      for (Index k = 0; k < 16; ++k) target[static_cast<Index>(i) * 16 + k] += 7.0;
  CHECK(masked_mse(tape.constant(pred), target, flags).value()[0] == l0);
  // Exact predictions give zero loss.
  CHECK(masked_mse(tape.constant(patchify(f.images, 4)), patchify(f.images, 4), flags).value()[0] == 0.0);
}

TEST_CASE("pretraining keeps the backbone only and is deterministic") {
  DatasetSpec spec;
  spec.n_subjects = 4;
  spec.images_per_subject = 16;
  const Dataset ds = generate_dataset(spec);
  MaeConfig cfg;
  cfg.epochs = 2;
  cfg.n_images = 64;
  int calls = 0;
  const PretrainResult a = pretrain(cfg, ds, [&](int, double, double) { ++calls; });
  const PretrainResult b = pretrain(cfg, ds);
  CHECK(calls == 2);
  CHECK(a.epoch_loss.size() == 2u);
  CHECK(a.eval_loss.size() == 3u);
  CHECK(a.backbone == b.backbone);
  CHECK(a.eval_loss == b.eval_loss);
  for (const auto& name : a.backbone.names()) CHECK(name.rfind("backbone.", 0) == 0);
  CHECK(!a.backbone.has_group(ParamGroup::decoder));
}

TEST_CASE("MAE config is strict") {
  Json j = to_json(MaeConfig{});
  CHECK(to_json(mae_config_from_json(j)) == j);
  j["mask"] = 0.5;
  CHECK_THROWS_AS(mae_config_from_json(j), ConfigError);
}
