// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>

#include "doctest.h"
#include "iatlab/diagnostics.hpp"

using namespace iat;

TEST_CASE("F1 hand cases") {
  const std::vector<std::uint8_t> t{1, 0, 1, 1, 0, 1};
  CHECK(f1_metrics(t, t, 2).macro == 1.0);
  const std::vector<std::uint8_t> none(6, 0), all(6, 1);
  const F1Result zero = f1_metrics(none, all, 3);
  for (double f : zero.per_class) CHECK(f == 0.0);
  // One class: TP=3, FP=1, FN=2.
  const std::vector<std::uint8_t> pred{1, 1, 1, 1, 0, 0, 0};
  const std::vector<std::uint8_t> tgt{1, 1, 1, 0, 1, 1, 0};
  CHECK(f1_metrics(pred, tgt, 1).macro == doctest::Approx(6.0 / 9.0).epsilon(1e-15));
  // Degenerate class: no positives anywhere.
  const F1Result d = f1_metrics(std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{0, 1}, 2);
  CHECK(d.degenerate[0]);
  CHECK(d.per_class[0] == 1.0);
  CHECK_FALSE(d.degenerate[1]);
  CHECK_THROWS_AS(f1_metrics(pred, tgt, 2), ContractError);
}

TEST_CASE("F1 is invariant under row permutation") {
  Rng rng(4);
  std::vector<std::uint8_t> p(60), t(60);
  for (auto& v : p) v = rng.bernoulli(0.4);
  for (auto& v : t) v = rng.bernoulli(0.4);
  std::vector<int> rows(20);
  std::iota(rows.begin(), rows.end(), 0);
  rng.shuffle(rows);
  std::vector<std::uint8_t> pp, tp;
  for (int r : rows)
    for (int k = 0; k < 3; ++k) {
      pp.push_back(p[static_cast<std::size_t>(r * 3 + k)]);
      tp.push_back(t[static_cast<std::size_t>(r * 3 + k)]);
    }
  CHECK(f1_metrics(p, t, 3).per_class == f1_metrics(pp, tp, 3).per_class);
}

TEST_CASE("default sweep grids") {
  CHECK(default_lambda_grid() == std::vector<double>{0, 0.02, 0.2, 1, 2, 3});
  CHECK(default_depth_grid() == std::vector<double>{1, 2, 3});
}

TEST_CASE("untrained backbone on shortcut-free data probes at chance") {
  DatasetSpec spec;
  spec.identity_signature_strength = 0.0;
  const Dataset ds = generate_dataset(spec);
  const ModelParams<float> p = init_model(TrainConfig{}, 12, 27).subset({ParamGroup::backbone});
  const ModelParams<float> before = p;
  ProbeConfig pc;
  const ProbeSplit split = probe_split(ds, pc.train_per_subject, pc.test_per_subject, pc.seed);
  const ProbeResult r = linear_probe(p, BackboneConfig{}, ds, split, pc);
  const double n = static_cast<double>(split.test.size());
  const double se = std::sqrt(r.chance * (1 - r.chance) / n);
  INFO("accuracy ", r.accuracy);
  CHECK(r.chance == doctest::Approx(1.0 / 41.0));
  CHECK(std::abs(r.accuracy - r.chance) <= 3 * se);
  CHECK(p == before);
}

TEST_CASE("probe finds a planted identity and loses it on shuffled labels") {
  DatasetSpec spec;
  spec.identity_signature_strength = 1.0;
  const Dataset ds = generate_dataset(spec);
  const ModelParams<float> p = init_model(TrainConfig{}, 12, 27).subset({ParamGroup::backbone});
  ProbeConfig pc;
  const ProbeSplit split = probe_split(ds, pc.train_per_subject, pc.test_per_subject, pc.seed);
  const ProbeResult real = linear_probe(p, BackboneConfig{}, ds, split, pc);
  const ProbeResult shuffled = linear_probe(p, BackboneConfig{}, ds, split, pc, true);
  const double se = std::sqrt(shuffled.chance * (1 - shuffled.chance) / static_cast<double>(split.test.size()));
  INFO("real ", real.accuracy, " shuffled ", shuffled.accuracy);
  CHECK(real.accuracy > 10 * real.chance);
  CHECK(std::abs(shuffled.accuracy - shuffled.chance) <= 3 * se);
  CHECK(real.probe_epochs <= pc.max_epochs);
}

TEST_CASE("probe config round trip") {
  Json j = to_json(ProbeConfig{});
  CHECK(to_json(probe_config_from_json(j)) == j);
  j["lr_decay"] = 1;
  CHECK_THROWS_AS(probe_config_from_json(j), ConfigError);
}

TEST_CASE("feature export schema and determinism") {
  DatasetSpec spec;
  spec.n_subjects = 5;
  spec.images_per_subject = 4;
  const Dataset ds = generate_dataset(spec);
  const ModelParams<float> p = init_model(TrainConfig{}, 12, 3);
  const std::string a = export_features_csv(p, BackboneConfig{}, ds);
  CHECK(a == export_features_csv(p, BackboneConfig{}, ds));
  std::istringstream in(a);
  std::string header, line;
  std::getline(in, header);
  CHECK(std::count(header.begin(), header.end(), ',') + 1 == 1 + 12 + 32);
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 20);
  const std::string sub = export_features_csv(p, BackboneConfig{}, ds, 2);
  CHECK(std::count(sub.begin(), sub.end(), '\n') == 1 + 8);
}

TEST_CASE("sweep rows are independent of execution order and job count") {
  DatasetSpec spec;
  spec.n_subjects = 6;
  spec.images_per_subject = 12;
  const Dataset ds = generate_dataset(spec);
  TrainConfig base;
  base.epochs = 2;
  base.warmup_epochs = 1;
  base.batch_size = 16;
  const std::vector<double> values{0.0, 2.0};
  const std::vector<double> reversed{2.0, 0.0};
  const std::vector<std::uint64_t> seeds{1, 2};
  const SweepTable serial = run_sweep(base, SweepKind::lambda, values, seeds, ds, 1);
  const SweepTable parallel = run_sweep(base, SweepKind::lambda, values, seeds, ds, 3);
  const SweepTable flipped = run_sweep(base, SweepKind::lambda, reversed, seeds, ds, 2);
  CHECK(sweep_csv(serial) == sweep_csv(parallel));
  CHECK(sweep_runs_jsonl(serial) == sweep_runs_jsonl(parallel));
  REQUIRE(serial.rows.size() == 2u);
  CHECK(serial.rows[0].mean_f1 == flipped.rows[1].mean_f1);
  CHECK(serial.rows[1].mean_id_loss == flipped.rows[0].mean_id_loss);
  for (const auto& r : serial.rows) CHECK(r.complete);
  CHECK(render_sweep_table(serial).find("lambda") != std::string::npos);
}

TEST_CASE("calibration never picks strength zero when the band excludes chance") {
  DatasetSpec spec;
  spec.n_subjects = 6;
  spec.images_per_subject = 20;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.batch_size = 32;
  ProbeConfig pc;
  pc.train_per_subject = 14;
  pc.test_per_subject = 6;
  const std::vector<double> strengths{0.0, 1.0};
  const CalibrationResult r = calibrate_benchmark(spec, strengths, cfg, pc);
  CHECK(r.trace.size() == 2u);
  CHECK(r.spec.identity_signature_strength == 1.0);
  CHECK(calibration_csv(r).rfind("strength,", 0) == 0);
}
