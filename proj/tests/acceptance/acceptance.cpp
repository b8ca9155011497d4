// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: evaluates criteria 1-9 and prints one PASS/FAIL line
// per criterion, preceded by the measurements it was decided on. The exit
// status reports whether the runner completed, not whether every criterion
// passed.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "../common/op_suite.hpp"
#include "iatlab/checkpoint.hpp"
#include "iatlab/diagnostics.hpp"
#include "iatlab/mae.hpp"
#include "iatlab/patch.hpp"

using namespace iat;
using Clock = std::chrono::steady_clock;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::string join(const std::vector<double>& v, const char* f = "%.4f") {
  std::string s;
  for (double x : v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), f, x);
    s += (s.empty() ? "" : " ") + std::string(buf);
  }
  return s;
}

int failures = 0;
std::FILE* report = nullptr;  // optional copy of stdout

void emit(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void emit(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  va_list copy;
  va_copy(copy, ap);
  std::vprintf(fmt, ap);
  std::fflush(stdout);
  if (report != nullptr) {
    std::vfprintf(report, fmt, copy);
    std::fflush(report);
  }
  va_end(copy);
  va_end(ap);
}

void verdict(int id, bool ok, const std::string& what) {
  emit("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", what.c_str());
  if (!ok) ++failures;
}

void note(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void note(const char* fmt, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  emit("  %s\n", buf);
}

// ---------------------------------------------------------------------------
// Shared training runs on the default benchmark.

struct RunSummary {
  TrainResult result;
};

struct Bench {
  Dataset ds = generate_dataset(DatasetSpec{});
  FoldSplit split = split_subject_exclusive(ds, 3, TrainConfig{}.split_seed);
  std::map<std::tuple<bool, double, int, std::uint64_t>, TrainResult> cache;

  const TrainResult& run(bool iat, double lambda, int depth, std::uint64_t seed) {
    const auto key = std::make_tuple(iat, lambda, depth, seed);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    TrainConfig cfg;
    cfg.iat_enabled = iat;
    cfg.lambda = lambda;
    cfg.id_head_depth = depth;
    cfg.seed = seed;
    const auto t0 = Clock::now();
    TrainResult r = train(cfg, ds, split);
    // Keep only the epoch-1 snapshot; the rest are not needed here.
    r.snapshots.resize(std::min<std::size_t>(1, r.snapshots.size()));
    note("run iat=%d lambda=%g depth=%d seed=%llu: conv_epoch=%d f1_conv=%.4f peak=%.4f id_loss=%.4f (%.1fs)", iat,
         lambda, depth, static_cast<unsigned long long>(seed), r.convergence_epoch(), r.converged_f1(), r.peak_f1(),
         r.converged_id_loss(), seconds_since(t0));
    return cache.emplace(key, std::move(r)).first->second;
  }

  const TrainResult& baseline(std::uint64_t seed) { return run(false, 0.0, 1, seed); }
  const TrainResult& iat(double lambda, std::uint64_t seed, int depth = 1) { return run(true, lambda, depth, seed); }
};

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  double worst64 = 0.0, worst32 = 0.0;
  std::string worst_op;
  int n = 0;
  for (const auto& c : iat::testing::op_cases()) {
    const auto r = iat::testing::check_case(c);
    if (r.err32_shadow > worst32) worst_op = c.name;
    worst64 = std::max(worst64, r.err64);
    worst32 = std::max(worst32, r.err32_shadow);
    ++n;
  }
  note("%d op cases: max rel err f64 %.2e, f32-shadow %.2e (worst %s)", n, worst64, worst32, worst_op.c_str());
  for (double lambda : {0.0, 0.5, 2.0})
    for (int depth : {1, 2, 3}) {
      const auto r = iat::testing::check_full_network(iat::testing::small_net(lambda, depth), 0);
      note("full network lambda=%g depth=%d: %lld coords, f64 %.2e, f32-shadow %.2e", lambda, depth,
           static_cast<long long>(r.coords), r.err64, r.err32_shadow);
      worst64 = std::max(worst64, r.err64);
      worst32 = std::max(worst32, r.err32_shadow);
    }
  const double secs = seconds_since(t0);
  char buf[200];
  std::snprintf(buf, sizeof(buf), "gradient checks: f64 %.2e < 1e-6, f32-shadow %.2e < 1e-4, %.1fs < 60s", worst64,
                worst32, secs);
  verdict(1, worst64 < 1e-6 && worst32 < 1e-4 && secs < 60.0, buf);
}

void criterion2() {
  bool forward_ok = true;
  for (double lambda : {0.0, 0.5, 2.0}) {
    Tape<float> tape;
    const Tensor<float> x = iat::testing::randn({64, 32}, 77).cast<float>();
    const auto y = grad_reverse(tape.variable(x), lambda);
    forward_ok = forward_ok && std::memcmp(x.data(), y.value().data(), sizeof(float) * 64 * 32) == 0;
  }
  double worst_grad = 0.0, worst_update = 0.0;
  for (double lambda : {0.0, 0.5, 2.0}) {
    const auto f = iat::testing::small_net(lambda, 1);
    auto grads = [&](const ModelParams<double>& p, bool reverse, int which) {
      Tape<double> tape;
      Bound<double> b(tape, p);
      const auto out = forward_joint<double>(b, f.cfg.backbone, tape.constant(f.images), f.targets, f.ids, lambda, 1,
                                             true, reverse);
      return backward(which == 0 ? out.total : which == 1 ? out.l_au : *out.l_id, b.trainable());
    };
    ModelParams<double> realized = f.params, surgery = f.params;
    const auto g_total = grads(realized, true, 0);
    const auto g_au = grads(surgery, false, 1);
    const auto g_id = grads(surgery, false, 2);
    GradientMap<double> composed;
    double grad_err = 0.0;
    for (const auto& [name, g] : g_au) {
      Tensor<double> c = g;
      c.array() += (group_of(name) == ParamGroup::backbone ? -lambda : 1.0) * g_id.at(name).array();
      for (Index i = 0; i < c.size(); ++i)
        grad_err = std::max(grad_err, std::abs(g_total.at(name)[i] - c[i]) / std::max(1.0, std::abs(c[i])));
      composed.emplace(name, std::move(c));
    }
    AdamW<double> o1, o2;
    o1.step(realized, g_total, 1e-3);
    o2.step(surgery, composed, 1e-3);
    double update_err = 0.0;
    for (const auto& name : realized.names())
      for (Index i = 0; i < realized.at(name).size(); ++i) {
        const double a = realized.at(name)[i], b = surgery.at(name)[i];
        update_err = std::max(update_err, std::abs(a - b) / std::max(1.0, std::abs(b)));
      }
    note("lambda=%g: gradient vs g_au -/+ lambda g_id %.2e, parameters after one AdamW step %.2e", lambda, grad_err,
         update_err);
    worst_grad = std::max(worst_grad, grad_err);
    worst_update = std::max(worst_update, update_err);
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "reversal algebra: forward bit-exact=%s, gradient err %.2e <= 1e-12, post-step err %.2e <= 1e-10",
                forward_ok ? "yes" : "no", worst_grad, worst_update);
  verdict(2, forward_ok && worst_grad <= 1e-12 && worst_update <= 1e-10, buf);
}

void criterion3(Bench& b) {
  const auto t0 = Clock::now();
  const ProbeConfig pc;
  const ProbeSplit split = probe_split(b.ds, pc.train_per_subject, pc.test_per_subject, pc.seed);
  const BackboneConfig bb;
  std::vector<double> base_final, base_e1, iat_final;
  double chance = 0.0;
  for (auto seed : kSeeds) {
    const auto& base = b.baseline(seed);
    const auto& adv = b.iat(2.0, seed);
    const auto pf = linear_probe(base.final_params, bb, b.ds, split, pc);
    const auto p1 = linear_probe(base.snapshots.at(0), bb, b.ds, split, pc);
    const auto pi = linear_probe(adv.final_params, bb, b.ds, split, pc);
    chance = pf.chance;
    base_final.push_back(pf.accuracy);
    base_e1.push_back(p1.accuracy);
    iat_final.push_back(pi.accuracy);
  }
  const double se = std::sqrt(chance * (1 - chance) / static_cast<double>(split.test.size()));
  note("probe accuracy (chance %.4f): baseline final [%s], baseline epoch 1 [%s], IAT lambda=2 final [%s]", chance,
       join(base_final).c_str(), join(base_e1).c_str(), join(iat_final).c_str());
  const double bf = mean(base_final), b1 = mean(base_e1), ia = mean(iat_final);
  const double secs = seconds_since(t0);
  const bool ok = bf >= 10 * chance && b1 > 5 * chance && ia <= 0.5 * bf && ia > chance + 3 * se;
  char buf[300];
  std::snprintf(buf, sizeof(buf),
                "shortcut: baseline %.3f >= %.3f, epoch-1 %.3f > %.3f, IAT %.3f <= %.3f and > %.3f (%.0fs incl. "
                "shared runs)",
                bf, 10 * chance, b1, 5 * chance, ia, 0.5 * bf, chance + 3 * se, secs);
  verdict(3, ok, buf);
}

void criterion4(Bench& b) {
  std::map<double, std::vector<double>> f1;
  for (double lambda : {0.0, 1.0, 2.0})
    for (auto seed : kSeeds) f1[lambda].push_back(b.iat(lambda, seed).converged_f1());
  for (const auto& [lambda, v] : f1) note("lambda=%g held-out macro-F1 at convergence [%s] mean %.4f", lambda, join(v).c_str(), mean(v));
  const double best = std::max(mean(f1[1.0]), mean(f1[2.0]));
  const double gain = 100.0 * (best - mean(f1[0.0]));
  char buf[200];
  std::snprintf(buf, sizeof(buf), "generalization: best of lambda {1,2} minus lambda 0 = %+.2f F1 points (need >= +1.00)", gain);
  verdict(4, gain >= 1.0, buf);
}

void criterion5(Bench& b) {
  std::vector<double> epochs;
  for (double lambda : {0.0, 0.2, 2.0}) {
    std::vector<double> e;
    for (auto seed : kSeeds) e.push_back(b.iat(lambda, seed).convergence_epoch());
    note("lambda=%g convergence epochs [%s] mean %.2f", lambda, join(e, "%.0f").c_str(), mean(e));
    epochs.push_back(mean(e));
  }
  const bool ok = epochs[0] <= epochs[1] && epochs[1] <= epochs[2] && epochs[2] > epochs[0];
  char buf[200];
  std::snprintf(buf, sizeof(buf), "dynamics: mean convergence epoch %.2f <= %.2f <= %.2f with lambda 2 > lambda 0",
                epochs[0], epochs[1], epochs[2]);
  verdict(5, ok, buf);
}

void criterion6(Bench& b) {
  std::vector<double> loss, f1;
  for (int depth : {1, 2, 3}) {
    std::vector<double> l, f;
    for (auto seed : kSeeds) {
      const auto& r = b.iat(2.0, seed, depth);
      l.push_back(r.converged_id_loss());
      f.push_back(r.converged_f1());
    }
    note("depth=%d id loss [%s] mean %.4f; F1 [%s] mean %.4f", depth, join(l).c_str(), mean(l), join(f).c_str(), mean(f));
    loss.push_back(mean(l));
    f1.push_back(mean(f));
  }
  const bool ok = loss[0] > loss[1] && loss[1] > loss[2] && f1[0] > f1[1] && f1[0] > f1[2];
  char buf[200];
  std::snprintf(buf, sizeof(buf), "id-head depth: id loss %.4f > %.4f > %.4f, depth-1 F1 %.4f best of (%.4f, %.4f)",
                loss[0], loss[1], loss[2], f1[0], f1[1], f1[2]);
  verdict(6, ok, buf);
}

void criterion7(Bench& b) {
  // (a) masked-token-only loss, exact.
  MaeConfig cfg;
  const ModelParams<double> p = init_mae(cfg).cast<double>();
  Rng rng(5);
  const std::vector<MaskPlan> plans{random_mask(16, 0.75, rng), random_mask(16, 0.75, rng)};
  const Tensor<double> images = iat::testing::randn({2, 16, 16, 1}, 12);
  Tape<double> tape(false);
  Bound<double> bound(tape, p);
  const auto out = mae_forward(bound, cfg.backbone, cfg.decoder, tape.constant(images), plans);
  std::vector<std::uint8_t> flags;
  for (const auto& pl : plans) {
    const auto f = pl.flags();
    flags.insert(flags.end(), f.begin(), f.end());
  }
  Tensor<double> target = patchify(images, Index{4});
  const double l0 = out.loss.value()[0];
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (!flags[i])
      for (Index k = 0; k < 16; ++k) target[static_cast<Index>(i) * 16 + k] -= 3.0;
  const bool masked_only = masked_mse(tape.constant(out.pred.value()), target, flags).value()[0] == l0;

  // (b) reconstruction improves by >= 30% over 20 epochs on 512 images.
  std::vector<double> reduction;
  std::vector<ModelParams<float>> pretrained;
  for (auto seed : kSeeds) {
    MaeConfig mc;
    mc.seed = seed;
    const PretrainResult r = pretrain(mc, b.ds);
    reduction.push_back(1.0 - r.eval_loss.back() / r.eval_loss.front());
    pretrained.push_back(r.backbone);
  }
  note("masked-only loss exact: %s; masked MSE reduction [%s]", masked_only ? "yes" : "no", join(reduction).c_str());

  // (c) fine-tuning from the pretrained backbone reaches the F1 threshold
  // sooner than random initialization.
  constexpr double kThreshold = 0.6;
  constexpr int kEpochs = 15;
  auto epochs_to = [&](const TrainResult& r) {
    const auto f = r.heldout_f1();
    for (std::size_t e = 0; e < f.size(); ++e)
      if (f[e] >= kThreshold) return static_cast<double>(e + 1);
    return static_cast<double>(kEpochs + 1);
  };
  std::vector<double> from_pre, from_rand;
  for (std::size_t s = 0; s < kSeeds.size(); ++s) {
    TrainConfig tc;
    tc.iat_enabled = false;
    tc.epochs = kEpochs;
    tc.seed = kSeeds[s];
    tc.keep_snapshots = false;
    from_pre.push_back(epochs_to(train(tc, b.ds, b.split, &pretrained[s])));
    from_rand.push_back(epochs_to(train(tc, b.ds, b.split)));
  }
  note("epochs to held-out F1 >= %.2f (%d = never): pretrained [%s], random [%s]", kThreshold, kEpochs + 1,
       join(from_pre, "%.0f").c_str(), join(from_rand, "%.0f").c_str());
  const double min_red = *std::min_element(reduction.begin(), reduction.end());
  const bool ok = masked_only && min_red >= 0.30 && mean(from_pre) < mean(from_rand);
  char buf[200];
  std::snprintf(buf, sizeof(buf), "MAE: masked-only exact=%s, min reduction %.1f%% >= 30%%, epochs %.2f < %.2f",
                masked_only ? "yes" : "no", 100 * min_red, mean(from_pre), mean(from_rand));
  verdict(7, ok, buf);
}

void criterion8(Bench& b) {
  bool f1_ok = true;
  {
    const std::vector<std::uint8_t> pred{1, 1, 1, 1, 0, 0, 0}, tgt{1, 1, 1, 0, 1, 1, 0};
    f1_ok = f1_ok && f1_metrics(pred, tgt, 1).macro == 2.0 * 3 / (2.0 * 3 + 1 + 2);
    const std::vector<std::uint8_t> t{1, 0, 1, 1, 0, 1};
    f1_ok = f1_ok && f1_metrics(t, t, 3).macro == 1.0;
    const std::vector<std::uint8_t> none(6, 0), all(6, 1);
    for (double v : f1_metrics(none, all, 3).per_class) f1_ok = f1_ok && v == 0.0;
  }
  // Exhaustive partition check over every seed in a range and k in {2..5}.
  bool folds_ok = true;
  for (int k = 2; k <= 5; ++k)
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const FoldSplit s = split_subject_exclusive(41, k, seed);
      std::vector<int> count(static_cast<std::size_t>(k));
      for (int f : s.assignment) {
        if (f < 0 || f >= k) folds_ok = false;
        else ++count[static_cast<std::size_t>(f)];
      }
      const auto [lo, hi] = std::minmax_element(count.begin(), count.end());
      folds_ok = folds_ok && *hi - *lo <= 1 && std::accumulate(count.begin(), count.end(), 0) == 41;
    }
  const ProbeConfig pc;
  const ProbeSplit ps = probe_split(b.ds, pc.train_per_subject, pc.test_per_subject, pc.seed);
  std::set<Index> tr(ps.train.begin(), ps.train.end());
  bool split_ok = ps.train.size() == 41u * 70u && ps.test.size() == 41u * 30u && tr.size() == ps.train.size();
  for (Index r : ps.test) split_ok = split_ok && tr.count(r) == 0;
  const auto shuffled = linear_probe(b.baseline(1).final_params, BackboneConfig{}, b.ds, ps, pc, true);
  const double se = std::sqrt(shuffled.chance * (1 - shuffled.chance) / static_cast<double>(ps.test.size()));
  const bool control_ok = std::abs(shuffled.accuracy - shuffled.chance) <= 3 * se;
  note("F1 cases exact: %s; folds (800 splits) partition: %s; probe split 70/30 disjoint: %s; shuffled-label probe %.4f vs chance %.4f +- %.4f",
       f1_ok ? "yes" : "no", folds_ok ? "yes" : "no", split_ok ? "yes" : "no", shuffled.accuracy, shuffled.chance, 3 * se);
  verdict(8, f1_ok && folds_ok && split_ok && control_ok, "metric and protocol correctness");
}

void criterion9(Bench& b) {
  DatasetSpec spec;
  spec.n_subjects = 9;
  spec.images_per_subject = 30;
  const Dataset d1 = generate_dataset(spec), d2 = generate_dataset(spec);
  const bool data_ok = d1.au_labels == d2.au_labels &&
                       std::memcmp(d1.images.data(), d2.images.data(), sizeof(float) * d1.images.values().size()) == 0;
  auto train_bytes = [&] {
    TrainConfig tc;
    tc.epochs = 3;
    tc.warmup_epochs = 1;
    const TrainResult r = train(tc, d1, split_subject_exclusive(d1, 3, tc.split_seed));
    std::string metrics;
    for (const auto& e : r.epochs) metrics += to_json(e.train).dump() + to_json(e.heldout).dump();
    Checkpoint c;
    c.params = r.final_params;
    return std::pair{metrics, encode_checkpoint(c)};
  };
  const auto a = train_bytes(), c = train_bytes();
  auto mae_bytes = [&] {
    MaeConfig mc;
    mc.epochs = 2;
    mc.n_images = 128;
    Checkpoint ck;
    ck.params = pretrain(mc, d1).backbone;
    return encode_checkpoint(ck);
  };
  const bool train_ok = a.first == c.first && a.second == c.second;
  const bool mae_ok = mae_bytes() == mae_bytes();
  // Sweeps merge by index, so the job count must not matter.
  TrainConfig sc;
  sc.epochs = 2;
  sc.warmup_epochs = 1;
  const std::vector<double> values{0.0, 2.0};
  const std::vector<std::uint64_t> seeds{1, 2};
  const bool sweep_ok = sweep_csv(run_sweep(sc, SweepKind::lambda, values, seeds, d1, 1)) ==
                        sweep_csv(run_sweep(sc, SweepKind::lambda, values, seeds, d1, 4));
  (void)b;
  note("dataset bytes equal: %s; train metrics+checkpoint bytes equal: %s; MAE checkpoint bytes equal: %s; sweep jobs 1 vs 4 equal: %s",
       data_ok ? "yes" : "no", train_ok ? "yes" : "no", mae_ok ? "yes" : "no", sweep_ok ? "yes" : "no");
  verdict(9, data_ok && train_ok && mae_ok && sweep_ok, "byte-identical reruns");
}

}  // namespace

// Usage: iatlab_acceptance [report_path]
int main(int argc, char** argv) {
  const auto t0 = Clock::now();
  if (argc > 1 && (report = std::fopen(argv[1], "w")) == nullptr) {
    std::printf("cannot open report file %s\n", argv[1]);
    return 1;
  }
  try {
    criterion1();
    criterion2();
    Bench bench;
    criterion3(bench);
    criterion4(bench);
    criterion5(bench);
    criterion6(bench);
    criterion7(bench);
    criterion8(bench);
    criterion9(bench);
  } catch (const std::exception& e) {
    emit("acceptance runner aborted: %s\n", e.what());
    return 1;
  }
  emit("summary: %d of 9 criteria failed (%.0fs)\n", failures, seconds_since(t0));
  return 0;
}
