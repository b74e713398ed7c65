// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "d2mlp/rng.hpp"
#include "d2mlp/tape.hpp"

namespace d2mlp {

/// Builds a scalar on `tape` from the leaves bound to the given inputs.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

enum class GradcheckMode {
  /// Perturb individual coordinates (all, or a seeded sample per input).
  coordinates,
  /// Perturb each whole input along seeded random +-1 directions.
  directions,
};

struct GradcheckOptions {
  double eps = 1e-5;
  GradcheckMode mode = GradcheckMode::coordinates;
  /// coordinates: 0 checks every coordinate, else at most this many per input.
  std::size_t max_coords_per_input = 0;
  /// directions: probes per input.
  std::size_t directions_per_input = 1;
  std::uint64_t seed = 0;
  /// Gate on one norm-wise error over all inputs together instead of the worst input.
  bool joint = false;
};

struct GradcheckInputError {
  /// ||a - n|| / max(||a||, ||n||, 1e-8) over the checked coordinates (or probes) of one input.
  double rel_error = 0;
  double analytic_norm = 0;
  std::size_t probes = 0;
};

struct GradcheckResult {
  /// Worst per-input error (or the joint error); the pass/fail figure.
  double max_rel_error = 0;
  /// Norm-wise error over every probe of every input.
  double joint_rel_error = 0;
  std::size_t worst_input = 0;
  std::vector<GradcheckInputError> per_input;
  /// Largest single-coordinate relative error. FD rounding dominates it where a
  /// coordinate's gradient is tiny, so it is reported but not gated on.
  double max_coord_rel_error = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t probes = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central-difference check of the reverse-mode gradient of f at `inputs`.
inline GradcheckResult gradcheck(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                 const GradcheckOptions& opt = {}) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, grads != nullptr));
    Var<double> out = f(tape, vars);
    if (out.value().size() != 1) throw ShapeError("gradcheck: function must return a scalar");
    if (grads) {
      tape.backward(out);
      for (const auto& v : vars) grads->push_back(tape.grad_or_zeros(v));
    }
    return out.value()[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, &analytic);

  GradcheckResult result;
  Rng rng(opt.seed, 0x67726164);
  auto central = [&](std::size_t k, const std::function<void(Tensor<double>&, double)>& shift) {
    shift(inputs[k], opt.eps);
    const double plus = evaluate(inputs, nullptr);
    shift(inputs[k], -2 * opt.eps);
    const double minus = evaluate(inputs, nullptr);
    shift(inputs[k], opt.eps);
    return (plus - minus) / (2 * opt.eps);
  };
  auto note_probe = [&](double a, double n) {
    const double err = relative_error(a, n);
    if (err > result.max_coord_rel_error || result.probes == 0) {
      result.max_coord_rel_error = err;
      result.worst_analytic = a;
      result.worst_numeric = n;
    }
    ++result.probes;
  };

  double all_diff2 = 0, all_a2 = 0, all_n2 = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff2 = 0, a2 = 0, n2 = 0;
    GradcheckInputError ie;
    if (opt.mode == GradcheckMode::coordinates) {
      std::vector<std::size_t> coords(inputs[k].size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      if (opt.max_coords_per_input && coords.size() > opt.max_coords_per_input) {
        rng.shuffle(coords);
        coords.resize(opt.max_coords_per_input);
        std::sort(coords.begin(), coords.end());
      }
      for (std::size_t idx : coords) {
        const double orig = inputs[k][idx];
        const double n = central(k, [idx](Tensor<double>& t, double d) { t[idx] += d; });
        inputs[k][idx] = orig;
        const double a = analytic[k][idx];
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        note_probe(a, n);
        ++ie.probes;
      }
    } else {
      const Tensor<double> orig = inputs[k];
      for (std::size_t d = 0; d < opt.directions_per_input; ++d) {
        Tensor<double> u(orig.shape());
        for (auto& v : u.data()) v = rng.below(2) ? 1.0 : -1.0;
        const double n = central(k, [&u](Tensor<double>& t, double s) {
          for (std::size_t i = 0; i < t.size(); ++i) t[i] += s * u[i];
        });
        inputs[k] = orig;
        double a = 0;
        for (std::size_t i = 0; i < u.size(); ++i) a += analytic[k][i] * u[i];
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        note_probe(a, n);
        ++ie.probes;
      }
    }
    all_diff2 += diff2;
    all_a2 += a2;
    all_n2 += n2;
    ie.analytic_norm = std::sqrt(a2);
    ie.rel_error = ie.probes ? std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8}) : 0.0;
    if (ie.rel_error > result.max_rel_error || k == 0) {
      result.max_rel_error = ie.rel_error;
      result.worst_input = k;
    }
    result.per_input.push_back(ie);
  }
  result.joint_rel_error = std::sqrt(all_diff2) / std::max({std::sqrt(all_a2), std::sqrt(all_n2), 1e-8});
  if (opt.joint) result.max_rel_error = result.joint_rel_error;
  return result;
}

/// Single-input form.
inline GradcheckResult gradcheck(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x0,
                                 double eps = 1e-5) {
  GradcheckOptions opt;
  opt.eps = eps;
  return gradcheck([&](Tape<double>&, std::span<const Var<double>> v) { return f(v[0]); }, {x0}, opt);
}

}  // namespace d2mlp
