// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "../common/op_suite.hpp"
#include "doctest.h"
#include "iatlab/checkpoint.hpp"

using namespace iat;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.n_subjects = 6;
  s.images_per_subject = 20;
  return s;
}

TrainConfig tiny_cfg() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 16;
  c.warmup_epochs = 1;
  return c;
}

GradientMap<double> grads_of(const iat::testing::NetFixture& f, const ModelParams<double>& p, bool reverse,
                             int which /* 0 total, 1 au, 2 id */) {
  Tape<double> tape;
  Bound<double> b(tape, p);
  const auto out = forward_joint<double>(b, f.cfg.backbone, tape.constant(f.images), f.targets, f.ids, f.cfg.lambda,
                                         f.cfg.id_head_depth, true, reverse);
  const Var<double> loss = which == 0 ? out.total : which == 1 ? out.l_au : *out.l_id;
  return backward(loss, b.trainable());
}

}  // namespace

TEST_CASE("convergence rule") {
  const std::vector<double> plateau{0.5, 0.6, 0.65, 0.65, 0.65, 0.65, 0.65, 0.65};
  CHECK(detect_convergence(plateau, 0.0005, 5).index == 2);
  CHECK_FALSE(detect_convergence(plateau, 0.0005, 5).warning);
  const std::vector<double> rising{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  CHECK(detect_convergence(rising, 0.0005, 5).index == 6);
  // A late gain beyond delta defers convergence; one within delta does not.
  const std::vector<double> late{0.5, 0.6, 0.6, 0.6, 0.7, 0.7, 0.7};
  CHECK(detect_convergence(late, 0.0005, 5).index == 4);
  const std::vector<double> tiny{0.5, 0.6, 0.6, 0.6004, 0.6, 0.6, 0.6};
  CHECK(detect_convergence(tiny, 0.0005, 5).index == 1);
  const std::vector<double> short_series{0.1, 0.3};
  const auto c = detect_convergence(short_series, 0.0005, 5);
  CHECK(c.warning);
  CHECK(c.index == 1);
}

TEST_CASE("graph surgery: backbone gradient is g_au - lambda g_id") {
  for (double lambda : {0.0, 0.5, 2.0}) {
    const auto f = iat::testing::small_net(lambda, 1);
    const auto total = grads_of(f, f.params, true, 0);
    const auto g_au = grads_of(f, f.params, false, 1);
    const auto g_id = grads_of(f, f.params, false, 2);
    for (const auto& [name, g] : total) {
      const auto group = group_of(name);
      for (Index i = 0; i < g.size(); ++i) {
        const double au = g_au.at(name)[i], id = g_id.at(name)[i];
        if (group == ParamGroup::backbone) {
          CHECK(std::abs(g[i] - (au - lambda * id)) <= 1e-12 * std::max(1.0, std::abs(au - lambda * id)));
        } else if (group == ParamGroup::task_head) {
          CHECK(id == 0.0);
          CHECK(g[i] == au);
        } else {
          CHECK(au == 0.0);
          CHECK(g[i] == id);
        }
      }
    }
  }
}

TEST_CASE("lambda zero sends no identity gradient into the backbone") {
  const auto f = iat::testing::small_net(0.0, 1);
  const auto total = grads_of(f, f.params, true, 0);
  const auto g_au = grads_of(f, f.params, false, 1);
  double id_head_norm = 0.0;
  for (const auto& [name, g] : total) {
    if (group_of(name) == ParamGroup::backbone)
      for (Index i = 0; i < g.size(); ++i) CHECK(g[i] == g_au.at(name)[i]);
    if (group_of(name) == ParamGroup::id_head) id_head_norm += g.array().abs().sum();
  }
  CHECK(id_head_norm > 0.0);
}

TEST_CASE("realized update equals the optimizer applied to the decomposed gradient") {
  for (double lambda : {0.0, 0.5, 2.0}) {
    const auto f = iat::testing::small_net(lambda, 1);
    ModelParams<double> a = f.params, b = f.params;
    AdamW<double> oa, ob;
    oa.step(a, grads_of(f, a, true, 0), 1e-3);
    const auto g_au = grads_of(f, b, false, 1);
    const auto g_id = grads_of(f, b, false, 2);
    GradientMap<double> composed;
    for (const auto& [name, g] : g_au) {
      Tensor<double> c = g;
      const double k = group_of(name) == ParamGroup::backbone ? -lambda : 1.0;
      c.array() += k * g_id.at(name).array();
      composed.emplace(name, std::move(c));
    }
    ob.step(b, composed, 1e-3);
    for (const auto& name : a.names())
      for (Index i = 0; i < a.at(name).size(); ++i)
        CHECK(std::abs(a.at(name)[i] - b.at(name)[i]) <= 1e-12 * std::max(1.0, std::abs(b.at(name)[i])));
  }
}

TEST_CASE("forward_joint contract") {
  auto f = iat::testing::small_net(1.0, 1);
  Tape<double> tape;
  Bound<double> b(tape, f.params);
  const auto out = forward_joint<double>(b, f.cfg.backbone, tape.constant(f.images), f.targets, f.ids, 1.0, 1, true);
  CHECK(out.id_logits.has_value());
  CHECK(out.total.value()[0] == doctest::Approx(out.l_au.value()[0] + out.l_id->value()[0]).epsilon(1e-15));
  const auto off = forward_joint<double>(b, f.cfg.backbone, tape.constant(f.images), f.targets, {}, 1.0, 1, false);
  CHECK_FALSE(off.l_id.has_value());
  CHECK(off.total.value()[0] == off.l_au.value()[0]);
  const std::vector<int> short_ids{0};
  CHECK_THROWS(forward_joint<double>(b, f.cfg.backbone, tape.constant(f.images), f.targets, short_ids, 1.0, 1, true));
}

TEST_CASE("id head separation: frozen backbone, id head alone lowers L_id") {
  const Dataset ds = generate_dataset(DatasetSpec{});
  TrainConfig cfg;
  const FoldSplit split = split_subject_exclusive(ds, 3, cfg.split_seed);
  const auto subjects = split.train_subjects(cfg.fold);
  const auto rows = rows_for_subjects(ds, subjects);
  std::vector<int> local(41, -1);
  for (std::size_t k = 0; k < subjects.size(); ++k) local[static_cast<std::size_t>(subjects[k])] = static_cast<int>(k);
  ModelParams<float> p = init_model(cfg, 12, static_cast<Index>(subjects.size()));
  const ModelParams<float> backbone_before = p.subset({ParamGroup::backbone});
  auto id_loss = [&] {
    double s = 0.0;
    for (std::size_t start = 0; start < rows.size(); start += 256) {
      const std::span<const Index> batch(rows.data() + start, std::min<std::size_t>(256, rows.size() - start));
      std::vector<int> ids;
      for (Index r : batch) ids.push_back(local[static_cast<std::size_t>(ds.subject_ids[static_cast<std::size_t>(r)])]);
      Tape<float> tape(false);
      Bound<float> b(tape, p);
      const auto f = backbone_forward(b, cfg.backbone, tape.constant(ds.images_at(batch)));
      s += cross_entropy(id_head_forward(b, f, 1), ids).value()[0] * static_cast<double>(batch.size());
    }
    return s / static_cast<double>(rows.size());
  };
  const double before = id_loss();
  AdamW<float> opt(cfg.optim);
  for (std::size_t start = 0; start < rows.size(); start += 64) {
    const std::span<const Index> batch(rows.data() + start, std::min<std::size_t>(64, rows.size() - start));
    std::vector<int> ids;
    for (Index r : batch) ids.push_back(local[static_cast<std::size_t>(ds.subject_ids[static_cast<std::size_t>(r)])]);
    Tape<float> tape;
    Bound<float> b(tape, p, {ParamGroup::backbone, ParamGroup::task_head});
    const auto f = backbone_forward(b, cfg.backbone, tape.constant(ds.images_at(batch)));
    opt.step(p, backward(cross_entropy(id_head_forward(b, f, 1), ids), b.trainable()), 1e-2);
  }
  CHECK(id_loss() < before);
  CHECK(p.subset({ParamGroup::backbone}) == backbone_before);
}

TEST_CASE("baseline and lambda-zero runs share the AU trajectory") {
  const Dataset ds = generate_dataset(tiny_spec());
  const FoldSplit split = split_subject_exclusive(ds, 3, 7);
  TrainConfig off = tiny_cfg();
  off.iat_enabled = false;
  TrainConfig zero = tiny_cfg();
  zero.lambda = 0.0;
  const auto a = train(off, ds, split).heldout_f1();
  const auto b = train(zero, ds, split).heldout_f1();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);
}

TEST_CASE("training is deterministic and reports every epoch") {
  const Dataset ds = generate_dataset(tiny_spec());
  const FoldSplit split = split_subject_exclusive(ds, 3, 7);
  int calls = 0;
  const TrainResult a = train(tiny_cfg(), ds, split, nullptr, [&](const EpochMetrics&) { ++calls; });
  const TrainResult b = train(tiny_cfg(), ds, split);
  CHECK(calls == 3);
  CHECK(a.epochs.size() == 3u);
  CHECK(a.snapshots.size() == 3u);
  CHECK(a.final_params == b.final_params);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(to_json(a.epochs[e].train).dump() == to_json(b.epochs[e].train).dump());
    CHECK(to_json(a.epochs[e].heldout).dump() == to_json(b.epochs[e].heldout).dump());
    CHECK(a.epochs[e].heldout.split == "heldout");
  }
  CHECK(a.convergence.warning);  // 3 epochs < patience 5
  // Identity classes are the training-fold subjects only.
  CHECK(a.final_params.at("id_head.0.w").dim(1) == static_cast<Index>(a.train_subjects.size()));
  for (int s : a.test_subjects)
    CHECK(std::find(a.train_subjects.begin(), a.train_subjects.end(), s) == a.train_subjects.end());
}

TEST_CASE("backbone initialization from a checkpoint") {
  const Dataset ds = generate_dataset(tiny_spec());
  const FoldSplit split = split_subject_exclusive(ds, 3, 7);
  TrainConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  ModelParams<float> bad;
  bad.add("backbone.pos_embed", Tensor<float>(Shape{3, 3}), false);
  CHECK_THROWS_AS(train(cfg, ds, split, &bad), CheckpointError);
}

TEST_CASE("train config validation and strict parsing") {
  TrainConfig c;
  c.id_head_depth = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  Json j = to_json(TrainConfig{});
  CHECK(to_json(train_config_from_json(j)) == j);
  j["optim"]["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const ModelParams<float> p = init_model(TrainConfig{}, 12, 27);
  Checkpoint c;
  c.metadata = {{"kind", "train"}};
  c.params = p;
  const Bytes bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.params == p);
  CHECK(back.metadata == c.metadata);
  CHECK(encode_checkpoint(back) == bytes);
  for (const auto& name : p.names()) CHECK(back.params.decays(name) == p.decays(name));
  CHECK(decays_by_name("task_head.w"));
  CHECK_FALSE(decays_by_name("task_head.b"));
  Bytes broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(broken), CheckpointError);
  broken = bytes;
  broken.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(broken), CheckpointError);
}
