// Copyright 2026 The iatlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "iatlab/autodiff.hpp"
#include "iatlab/rng.hpp"

namespace iat {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates checked per input tensor; 0 checks all of them. Sampled
  // coordinates are drawn deterministically from sample_seed.
  Index max_coords_per_input = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  Index coords_checked = 0;
};

namespace detail {

inline std::vector<Index> pick_coords(Index n, const GradCheckOptions& opt, std::uint64_t salt) {
  std::vector<Index> all(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (opt.max_coords_per_input <= 0 || opt.max_coords_per_input >= n) return all;
  Rng rng(opt.sample_seed, {salt});
  rng.shuffle(all);
  all.resize(static_cast<std::size_t>(opt.max_coords_per_input));
  std::sort(all.begin(), all.end());
  return all;
}

template <typename Scalar, typename Fn>
Var<Scalar> eval_scalar(Fn& fn, Tape<Scalar>& tape, const std::vector<Var<Scalar>>& vars) {
  Var<Scalar> out = fn(tape, vars);
  if (!out.value().is_scalar()) {
    throw ContractError("finite_diff_check: function must return a scalar, got " + shape_string(out.shape()));
  }
  return out;
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar function with central
/// differences. fn(tape, inputs) builds the graph from the given input vars.
///
/// analytic_fn supplies the graph whose gradient is checked and oracle_fn the
/// graph that is finite-differenced, both in Scalar precision; passing the same
/// callable for both is the usual case. Returns
/// max |analytic - fd| / max(1, |fd|) over the checked coordinates.
template <typename Scalar, typename AnalyticFn, typename OracleFn>
GradCheckReport finite_diff_check(AnalyticFn analytic_fn, OracleFn oracle_fn, std::vector<Tensor<Scalar>> inputs,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  std::vector<Tensor<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var<Scalar> loss = detail::eval_scalar(analytic_fn, tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<Tensor<Scalar>>& xs) {
    Tape<Scalar> tape(false);
    std::vector<Var<Scalar>> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return static_cast<double>(detail::eval_scalar(oracle_fn, tape, vars).value()[0]);
  };

  GradCheckReport report;
  const auto h = static_cast<Scalar>(opt.eps);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index i : detail::pick_coords(inputs[k].size(), opt, k)) {
      const Scalar orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = evaluate(inputs);
      inputs[k][i] = orig - h;
      const double down = evaluate(inputs);
      inputs[k][i] = orig;
      const double fd = (up - down) / (2.0 * opt.eps);
      const double err = std::abs(static_cast<double>(analytic[k][i]) - fd) / std::max(1.0, std::abs(fd));
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.coords_checked;
    }
  }
  return report;
}

template <typename Scalar, typename Fn>
GradCheckReport finite_diff_check(Fn fn, std::vector<Tensor<Scalar>> inputs, const GradCheckOptions& opt = {}) {
  return finite_diff_check<Scalar>(fn, fn, std::move(inputs), opt);
}

/// Single-input convenience form: fn(tape, x) -> scalar var.
template <typename Scalar, typename Fn>
double finite_diff_check(Fn fn, const Tensor<Scalar>& x, double eps = 1e-5) {
  auto wrapped = [&fn](Tape<Scalar>& tape, const std::vector<Var<Scalar>>& vars) { return fn(tape, vars[0]); };
  GradCheckOptions opt;
  opt.eps = eps;
  return finite_diff_check<Scalar>(wrapped, std::vector<Tensor<Scalar>>{x}, opt).max_rel_error;
}

/// Shadow check for f32 graphs: the analytic gradient comes from the f32
/// graph, the central differences from the same graph run in f64.
template <typename Fn32, typename Fn64>
GradCheckReport finite_diff_check_shadow(Fn32 fn32, Fn64 fn64, const std::vector<Tensor<float>>& inputs,
                                         const GradCheckOptions& opt = {}) {
  std::vector<Tensor<float>> analytic;
  {
    Tape<float> tape;
    std::vector<Var<float>> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var<float> loss = detail::eval_scalar(fn32, tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  std::vector<Tensor<double>> shadow;
  for (const auto& x : inputs) shadow.push_back(x.template cast<double>());

  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return detail::eval_scalar(fn64, tape, vars).value()[0];
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < shadow.size(); ++k) {
    for (Index i : detail::pick_coords(shadow[k].size(), opt, k)) {
      const double orig = shadow[k][i];
      shadow[k][i] = orig + opt.eps;
      const double up = evaluate(shadow);
      shadow[k][i] = orig - opt.eps;
      const double down = evaluate(shadow);
      shadow[k][i] = orig;
      const double fd = (up - down) / (2.0 * opt.eps);
      const double err = std::abs(static_cast<double>(analytic[k][i]) - fd) / std::max(1.0, std::abs(fd));
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.coords_checked;
    }
  }
  return report;
}

}  // namespace iat
