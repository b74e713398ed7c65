// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include <json.hpp>

#include "d2mlp/tensor.hpp"

namespace d2mlp {

/// Binary H x W mask; any nonzero byte is "inside".
using Mask = Tensor<std::uint8_t>;

struct Pixel {
  std::size_t y = 0, x = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

namespace detail {
inline void require_mask(const Mask& m, const char* what) {
  if (m.rank() != 2) throw ShapeError(std::string(what) + ": masks must be rank 2 (H, W)");
}
inline void require_same_mask_shape(const Mask& a, const Mask& b, const char* what) {
  require_mask(a, what);
  require_mask(b, what);
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": mask shapes differ");
}
}  // namespace detail

/// 2|P ∩ G| / (|P| + |G|); two empty masks score 1.
inline double dice_score(const Mask& pred, const Mask& gt) {
  detail::require_same_mask_shape(pred, gt, "dice_score");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

/// Mask pixels with a 4-neighbour outside the mask; the image border counts as outside.
inline std::vector<Pixel> boundary_extract(const Mask& mask) {
  detail::require_mask(mask, "boundary_extract");
  const std::size_t H = mask.shape()[0], W = mask.shape()[1];
  auto inside = [&](std::size_t y, std::size_t x) { return mask[y * W + x] != 0; };
  std::vector<Pixel> out;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!inside(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == H || x + 1 == W || !inside(y - 1, x) || !inside(y + 1, x) ||
                        !inside(y, x - 1) || !inside(y, x + 1);
      if (edge) out.push_back({y, x});
    }
  }
  return out;
}

/// Linear interpolation between order statistics at rank q/100 * (n - 1).
inline double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace detail {

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher) over f, in place.
inline void distance_transform_1d(std::vector<double>& f, std::vector<double>& scratch_d, std::vector<std::size_t>& v,
                                  std::vector<double>& z) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  scratch_d.assign(n, inf);
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) return;  // nothing finite: leave f as +inf
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < inf)) continue;
    const double fq = f[q] + static_cast<double>(q * q);
    double s;
    while (true) {
      const double p = static_cast<double>(v[k]);
      s = (fq - (f[v[k]] + p * p)) / (2.0 * (static_cast<double>(q) - p));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    scratch_d[q] = d * d + f[v[k]];
  }
  f = scratch_d;
}

/// Exact squared Euclidean distance from every pixel to the nearest seed pixel.
inline std::vector<double> squared_distance_map(const std::vector<Pixel>& seeds, std::size_t H, std::size_t W) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(H * W, inf);
  for (const auto& p : seeds) grid[p.y * W + p.x] = 0;
  std::vector<double> line, d, z;
  std::vector<std::size_t> v;
  for (std::size_t x = 0; x < W; ++x) {
    line.resize(H);
    for (std::size_t y = 0; y < H; ++y) line[y] = grid[y * W + x];
    distance_transform_1d(line, d, v, z);
    for (std::size_t y = 0; y < H; ++y) grid[y * W + x] = line[y];
  }
  for (std::size_t y = 0; y < H; ++y) {
    line.assign(grid.begin() + static_cast<long>(y * W), grid.begin() + static_cast<long>((y + 1) * W));
    distance_transform_1d(line, d, v, z);
    std::copy(line.begin(), line.end(), grid.begin() + static_cast<long>(y * W));
  }
  return grid;
}

}  // namespace detail

struct SurfaceDistances {
  double hd95 = 0;
  double msd = 0;
  /// False when either mask is empty; the distances are then meaningless.
  bool valid = false;
};

/// Symmetric surface distances: the directed boundary-to-boundary nearest
/// distances of both directions are pooled, then averaged (MSD) and taken at
/// the 95th percentile (95HD).
inline SurfaceDistances surface_metrics(const Mask& pred, const Mask& gt) {
  detail::require_same_mask_shape(pred, gt, "surface_metrics");
  const std::size_t H = pred.shape()[0], W = pred.shape()[1];
  const auto bp = boundary_extract(pred);
  const auto bg = boundary_extract(gt);
  if (bp.empty() || bg.empty()) return {};
  const auto to_gt = detail::squared_distance_map(bg, H, W);
  const auto to_pred = detail::squared_distance_map(bp, H, W);
  std::vector<double> pooled;
  pooled.reserve(bp.size() + bg.size());
  for (const auto& p : bp) pooled.push_back(std::sqrt(to_gt[p.y * W + p.x]));
  for (const auto& p : bg) pooled.push_back(std::sqrt(to_pred[p.y * W + p.x]));
  double total = 0;
  for (double v : pooled) total += v;
  SurfaceDistances r;
  r.msd = total / static_cast<double>(pooled.size());
  r.hd95 = percentile_linear(std::move(pooled), 95.0);
  r.valid = true;
  return r;
}

struct ClassMetrics {
  double dice = 0;
  double hd95 = 0;
  double msd = 0;
  /// Samples where the class appears in prediction or reference.
  std::size_t dice_samples = 0;
  /// Samples where the class appears in both.
  std::size_t surface_samples = 0;

  bool dice_valid() const { return dice_samples > 0; }
  bool surface_valid() const { return surface_samples > 0; }
};

/// Per-class values are sample means over valid samples. The headline means
/// cover foreground classes (1..K-1) with at least one valid sample.
struct MetricReport {
  std::vector<ClassMetrics> per_class;
  double mean_dice = 0;
  double mean_hd95 = 0;
  double mean_msd = 0;
  bool mean_dice_valid = false;
  bool mean_surface_valid = false;
};

inline Mask class_mask(const LabelMap& labels, std::size_t sample, std::uint8_t cls) {
  const Shape& s = labels.shape();
  const std::size_t hw = s[1] * s[2];
  Mask m({s[1], s[2]});
  for (std::size_t i = 0; i < hw; ++i) m[i] = labels[sample * hw + i] == cls;
  return m;
}

/// Aggregates metrics over (B, H, W) predicted and reference label maps.
inline MetricReport evaluate_predictions(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
  if (pred.rank() != 3 || pred.shape() != gt.shape()) {
    throw ShapeError("evaluate_predictions: expected matching (B, H, W) label maps");
  }
  MetricReport rep;
  rep.per_class.resize(num_classes);
  std::vector<double> dice_sum(num_classes, 0), hd_sum(num_classes, 0), msd_sum(num_classes, 0);
  for (std::size_t n = 0; n < pred.shape()[0]; ++n) {
    for (std::size_t k = 0; k < num_classes; ++k) {
      const Mask p = class_mask(pred, n, static_cast<std::uint8_t>(k));
      const Mask g = class_mask(gt, n, static_cast<std::uint8_t>(k));
      const bool any_p = std::any_of(p.data().begin(), p.data().end(), [](auto v) { return v != 0; });
      const bool any_g = std::any_of(g.data().begin(), g.data().end(), [](auto v) { return v != 0; });
      if (!any_p && !any_g) continue;
      dice_sum[k] += dice_score(p, g);
      ++rep.per_class[k].dice_samples;
      const SurfaceDistances sd = surface_metrics(p, g);
      if (sd.valid) {
        hd_sum[k] += sd.hd95;
        msd_sum[k] += sd.msd;
        ++rep.per_class[k].surface_samples;
      }
    }
  }
  std::size_t nd = 0, ns = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& c = rep.per_class[k];
    if (c.dice_valid()) c.dice = dice_sum[k] / static_cast<double>(c.dice_samples);
    if (c.surface_valid()) {
      c.hd95 = hd_sum[k] / static_cast<double>(c.surface_samples);
      c.msd = msd_sum[k] / static_cast<double>(c.surface_samples);
    }
    if (k == 0) continue;
    if (c.dice_valid()) {
      rep.mean_dice += c.dice;
      ++nd;
    }
    if (c.surface_valid()) {
      rep.mean_hd95 += c.hd95;
      rep.mean_msd += c.msd;
      ++ns;
    }
  }
  if (nd) rep.mean_dice /= static_cast<double>(nd);
  if (ns) {
    rep.mean_hd95 /= static_cast<double>(ns);
    rep.mean_msd /= static_cast<double>(ns);
  }
  rep.mean_dice_valid = nd > 0;
  rep.mean_surface_valid = ns > 0;
  return rep;
}

inline nlohmann::json to_json(const MetricReport& r) {
  auto opt = [](bool valid, double v) { return valid ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& c = r.per_class[k];
    classes.push_back({{"class", k},
                       {"dice", opt(c.dice_valid(), c.dice)},
                       {"hd95", opt(c.surface_valid(), c.hd95)},
                       {"msd", opt(c.surface_valid(), c.msd)},
                       {"dice_samples", c.dice_samples},
                       {"surface_samples", c.surface_samples}});
  }
  return {{"per_class", classes},
          {"mean_dice", opt(r.mean_dice_valid, r.mean_dice)},
          {"mean_hd95", opt(r.mean_surface_valid, r.mean_hd95)},
          {"mean_msd", opt(r.mean_surface_valid, r.mean_msd)}};
}

}  // namespace d2mlp
