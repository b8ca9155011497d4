// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference gradient cases shared by the unit tests and the
// acceptance runner. Each case reduces an op's output to a scalar through a
// fixed random projection so that every output coordinate carries weight.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "iatlab/gradcheck.hpp"
#include "iatlab/train.hpp"

namespace iat::testing {

inline Tensor<double> randn(Shape shape, std::uint64_t seed, double scale = 1.0, double shift = 0.0) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed, {99});
  for (Index i = 0; i < t.size(); ++i) t[i] = shift + scale * rng.normal();
  return t;
}

// Values bounded away from zero so relu's kink is never straddled by +-eps.
inline Tensor<double> away_from_zero(Shape shape, std::uint64_t seed) {
  Tensor<double> t = randn(std::move(shape), seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = t[i] >= 0 ? t[i] + 0.1 : t[i] - 0.1;
  return t;
}

template <typename S>
Var<S> project(Var<S> x, std::uint64_t seed) {
  const Tensor<S> w = randn(x.shape(), seed + 1000).template cast<S>();
  return sum(mul(x, x.tape->constant(w)));
}

template <typename S>
using CaseFn = std::function<Var<S>(Tape<S>&, const std::vector<Var<S>>&)>;

struct OpCase {
  std::string name;
  std::vector<Tensor<double>> inputs;
  CaseFn<float> f32;
  CaseFn<double> f64;
};

#define IAT_CASE(name, inputs, body)                                                                  \
  OpCase {                                                                                          \
    name, inputs, [](Tape<float>& tape, const std::vector<Var<float>>& v) -> Var<float> body,       \
        [](Tape<double>& tape, const std::vector<Var<double>>& v) -> Var<double> body               \
  }

inline std::vector<OpCase> op_cases() {
  static const std::vector<Index> kIdx{2, 0, 3, 1, 3, 0};  // 2 samples x 3 tokens out of 4
  std::vector<OpCase> c;
  c.push_back(IAT_CASE("add", (std::vector{randn({3, 4}, 1), randn({3, 4}, 2)}), { (void)tape; return project(add(v[0], v[1]), 1); }));
  c.push_back(IAT_CASE("add_bias", (std::vector{randn({3, 4}, 3), randn({4}, 4)}), { (void)tape; return project(add(v[0], v[1]), 2); }));
  c.push_back(IAT_CASE("sub", (std::vector{randn({2, 5}, 5), randn({2, 5}, 6)}), { (void)tape; return project(sub(v[0], v[1]), 3); }));
  c.push_back(IAT_CASE("mul", (std::vector{randn({2, 5}, 7), randn({2, 5}, 8)}), { (void)tape; return project(mul(v[0], v[1]), 4); }));
  c.push_back(IAT_CASE("scale", (std::vector{randn({6}, 9)}), {
    (void)tape;
    using S = std::remove_cvref_t<decltype(v[0].value()[0])>;
    return project(scale(v[0], S(-1.75)), 5);
  }));
  c.push_back(IAT_CASE("matmul", (std::vector{randn({3, 4}, 10), randn({4, 2}, 11)}), { (void)tape; return project(matmul(v[0], v[1]), 6); }));
  c.push_back(IAT_CASE("bmm", (std::vector{randn({2, 3, 4}, 12), randn({2, 4, 2}, 13)}), { (void)tape; return project(bmm(v[0], v[1]), 7); }));
  c.push_back(IAT_CASE("bmm_transpose_b", (std::vector{randn({2, 3, 4}, 14), randn({2, 5, 4}, 15)}), { (void)tape; return project(bmm(v[0], v[1], true), 8); }));
  c.push_back(IAT_CASE("transpose", (std::vector{randn({3, 5}, 16)}), { (void)tape; return project(transpose(v[0]), 9); }));
  c.push_back(IAT_CASE("reshape", (std::vector{randn({2, 6}, 17)}), { (void)tape; return project(reshape(v[0], Shape{3, 4}), 10); }));
  c.push_back(IAT_CASE("relu", (std::vector{away_from_zero({2, 6}, 18)}), { (void)tape; return project(relu(v[0]), 11); }));
  c.push_back(IAT_CASE("gelu", (std::vector{randn({2, 6}, 19, 1.5)}), { (void)tape; return project(gelu(v[0]), 12); }));
  c.push_back(IAT_CASE("exp", (std::vector{randn({2, 4}, 20, 0.5)}), { (void)tape; return project(exp(v[0]), 13); }));
  c.push_back(IAT_CASE("log", (std::vector{randn({2, 4}, 21, 0.3, 2.0)}), { (void)tape; return project(log(v[0]), 14); }));
  c.push_back(IAT_CASE("sum", (std::vector{randn({3, 3}, 22)}), { (void)tape; return mul(sum(v[0]), sum(v[0])); }));
  c.push_back(IAT_CASE("mean", (std::vector{randn({3, 3}, 23)}), { (void)tape; return mul(mean(v[0]), mean(v[0])); }));
  c.push_back(IAT_CASE("sum_axis0", (std::vector{randn({2, 3, 4}, 24)}), { (void)tape; return project(sum_axis(v[0], 0), 15); }));
  c.push_back(IAT_CASE("sum_axis1", (std::vector{randn({2, 3, 4}, 25)}), { (void)tape; return project(sum_axis(v[0], 1), 16); }));
  c.push_back(IAT_CASE("mean_axis1", (std::vector{randn({2, 3, 4}, 26)}), { (void)tape; return project(mean_axis(v[0], 1), 17); }));
  c.push_back(IAT_CASE("softmax", (std::vector{randn({3, 5}, 27)}), { (void)tape; return project(softmax(v[0]), 18); }));
  c.push_back(IAT_CASE("log_softmax", (std::vector{randn({3, 5}, 28)}), { (void)tape; return project(log_softmax(v[0]), 19); }));
  c.push_back(IAT_CASE("layer_norm", (std::vector{randn({3, 6}, 29), randn({6}, 30, 0.5, 1.0), randn({6}, 31)}),
                       { (void)tape; return project(layer_norm(v[0], v[1], v[2], 1e-6), 20); }));
  c.push_back(IAT_CASE("split_heads", (std::vector{randn({2 * 3, 4}, 32)}), { (void)tape; return project(split_heads(v[0], 2, 3, 2), 21); }));
  c.push_back(IAT_CASE("merge_heads", (std::vector{randn({4, 3, 2}, 33)}), { (void)tape; return project(merge_heads(v[0], 2, 2), 22); }));
  c.push_back(IAT_CASE("gather_tokens", (std::vector{randn({2, 4, 3}, 34)}),
                       { (void)tape; return project(gather_tokens(v[0], std::span<const Index>(kIdx), 3), 23); }));
  c.push_back(IAT_CASE("scatter_tokens", (std::vector{randn({2, 3, 3}, 35), randn({3}, 36)}),
                       { (void)tape; return project(scatter_tokens(v[0], std::span<const Index>(kIdx), v[1], 4), 24); }));
  c.push_back(IAT_CASE("patchify", (std::vector{randn({2, 8, 8, 1}, 37)}), { (void)tape; return project(patchify(v[0], 4), 25); }));
  return c;
}

#undef IAT_CASE

struct CaseResult {
  std::string name;
  double err64 = 0.0;
  double err32_shadow = 0.0;
};

inline CaseResult check_case(const OpCase& c, double eps = 1e-5) {
  GradCheckOptions opt;
  opt.eps = eps;
  CaseResult r{c.name};
  r.err64 = finite_diff_check<double>(c.f64, c.inputs, opt).max_rel_error;
  std::vector<Tensor<float>> in32;
  for (const auto& t : c.inputs) in32.push_back(t.cast<float>());
  r.err32_shadow = finite_diff_check_shadow(c.f32, c.f64, in32, opt).max_rel_error;
  return r;
}

// ---------------------------------------------------------------------------
// Full two-head network.
//
// The analytic gradient of total = L_au + L_id through grad_reverse is
// checked against an oracle assembled from separate central differences of
// L_au and L_id: backbone coordinates must match fd(L_au) - lambda fd(L_id),
// head coordinates fd(L_au) + fd(L_id).

struct NetFixture {
  TrainConfig cfg;
  ModelParams<double> params;
  Tensor<double> images;
  Tensor<double> targets;
  std::vector<int> ids;
};

inline NetFixture small_net(double lambda, int depth = 2) {
  NetFixture f;
  f.cfg.lambda = lambda;
  f.cfg.id_head_depth = depth;
  f.cfg.backbone.embed_dim = 8;
  f.cfg.backbone.depth = 1;
  f.cfg.backbone.n_heads = 2;
  f.cfg.backbone.image_size = 8;
  f.cfg.backbone.patch_size = 4;
  const ModelParams<float> init = init_model(f.cfg, 3, 5);
  f.params = init.cast<double>();
  // Init draws are tiny (std 0.02); widen them so every path carries a
  // gradient well above finite-difference noise.
  Rng rng(5, {7});
  for (const auto& name : f.params.names()) {
    auto& t = f.params.at(name);
    for (Index i = 0; i < t.size(); ++i) t[i] += 0.3 * rng.normal();
  }
  f.images = randn({3, 8, 8, 1}, 40);
  f.targets = Tensor<double>(Shape{3, 3}, {1, 0, 1, 0, 0, 1, 1, 1, 0});
  f.ids = {0, 3, 4};
  return f;
}

template <typename S>
JointOutput<S> run_net(const NetFixture& f, const ModelParams<S>& params, Tape<S>& tape, Bound<S>& bound) {
  (void)params;
  return forward_joint<S>(bound, f.cfg.backbone, tape.constant(f.images.cast<S>()), f.targets.cast<S>(), f.ids,
                          f.cfg.lambda, f.cfg.id_head_depth, true, true);
}

struct NetCheck {
  double err64 = 0.0;
  double err32_shadow = 0.0;
  Index coords = 0;
};

// max_per_tensor = 0 checks every coordinate.
inline NetCheck check_full_network(const NetFixture& f, Index max_per_tensor = 4, double eps = 1e-5) {
  auto analytic = [&](auto tag) {
    using S = decltype(tag);
    const ModelParams<S> p = f.params.cast<S>();
    Tape<S> tape;
    Bound<S> b(tape, p);
    const auto out = run_net<S>(f, p, tape, b);
    return backward(out.total, b.trainable());
  };
  const auto g64 = analytic(double{});
  const auto g32 = analytic(float{});

  auto losses = [&](const ModelParams<double>& p) {
    Tape<double> tape(false);
    Bound<double> b(tape, p);
    const auto out = run_net<double>(f, p, tape, b);
    return std::pair{out.l_au.value()[0], out.l_id->value()[0]};
  };

  NetCheck r;
  ModelParams<double> p = f.params;
  std::uint64_t salt = 0;
  for (const auto& name : p.names()) {
    GradCheckOptions opt;
    opt.max_coords_per_input = max_per_tensor;
    opt.sample_seed = 11;
    const bool backbone = group_of(name) == ParamGroup::backbone;
    for (Index i : detail::pick_coords(p.at(name).size(), opt, salt++)) {
      const double orig = p.at(name)[i];
      p.at(name)[i] = orig + eps;
      const auto up = losses(p);
      p.at(name)[i] = orig - eps;
      const auto down = losses(p);
      p.at(name)[i] = orig;
      const double fd_au = (up.first - down.first) / (2 * eps);
      const double fd_id = (up.second - down.second) / (2 * eps);
      const double oracle = backbone ? fd_au - f.cfg.lambda * fd_id : fd_au + fd_id;
      const double denom = std::max(1.0, std::abs(oracle));
      r.err64 = std::max(r.err64, std::abs(g64.at(name)[i] - oracle) / denom);
      r.err32_shadow = std::max(r.err32_shadow, std::abs(static_cast<double>(g32.at(name)[i]) - oracle) / denom);
      ++r.coords;
    }
  }
  return r;
}

}  // namespace iat::testing
