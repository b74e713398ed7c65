// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "d2mlp/ops.hpp"
#include "d2mlp/params.hpp"

namespace d2mlp {

// ---------------------------------------------------------------------------
// Fold / unfold
//
// X is (C, H, W) or (B, C, H, W). The channels split into N contiguous slabs
// of C' = C / N; slab p holds source channels [p*C', (p+1)*C').
//
//   fold_width:  Y[c'*W + w, p, h] = X[p*C' + c', h, w]   -> (C'*W, N, H)
//   fold_height: Y[c'*H + h, p, w] = X[p*C' + c', h, w]   -> (C'*H, N, W)
// ---------------------------------------------------------------------------

enum class MixAxis { height, width };

namespace detail {

inline std::size_t channel_axis(const Shape& s) {
  if (s.size() == 4) return 1;
  if (s.size() == 3) return 0;
  throw ShapeError("expected a (C,H,W) or (B,C,H,W) tensor, got " + to_string(s));
}

template <class T>
Var<T> fold(const Var<T>& x, std::size_t patches, MixAxis axis) {
  const Shape& s = x.shape();
  const std::size_t ca = channel_axis(s);
  const std::size_t c = s[ca], h = s[ca + 1], w = s[ca + 2];
  if (patches == 0 || c % patches != 0) {
    throw ShapeError("fold: channel count " + std::to_string(c) + " is not divisible by patch count " +
                     std::to_string(patches));
  }
  const std::size_t sub = c / patches;
  Shape lead(s.begin(), s.begin() + static_cast<long>(ca));
  Shape split = lead;
  split.insert(split.end(), {patches, sub, h, w});
  // Axes of `split` after the leading ones: N=+0, C'=+1, H=+2, W=+3.
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < ca; ++i) perm.push_back(i);
  Shape out = lead;
  if (axis == MixAxis::width) {
    perm.insert(perm.end(), {ca + 1, ca + 3, ca + 0, ca + 2});
    out.insert(out.end(), {sub * w, patches, h});
  } else {
    perm.insert(perm.end(), {ca + 1, ca + 2, ca + 0, ca + 3});
    out.insert(out.end(), {sub * h, patches, w});
  }
  return reshape(permute(reshape(x, split), perm), out);
}

/// `extent` is the folded spatial size: W for the width path, H for the height path.
template <class T>
Var<T> unfold(const Var<T>& y, std::size_t extent, MixAxis axis) {
  const Shape& s = y.shape();
  const std::size_t ca = channel_axis(s);
  const std::size_t folded = s[ca], patches = s[ca + 1], rest = s[ca + 2];
  if (extent == 0 || folded % extent != 0) {
    throw ShapeError("unfold: folded extent " + std::to_string(folded) + " is not a multiple of " +
                     std::to_string(extent));
  }
  const std::size_t sub = folded / extent;
  Shape lead(s.begin(), s.begin() + static_cast<long>(ca));
  Shape split = lead;
  split.insert(split.end(), {sub, extent, patches, rest});
  // Axes of `split`: C'=+0, folded spatial=+1, N=+2, remaining spatial=+3.
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < ca; ++i) perm.push_back(i);
  perm.insert(perm.end(), {ca + 2, ca + 0});
  if (axis == MixAxis::width) {
    perm.insert(perm.end(), {ca + 3, ca + 1});  // -> N, C', H, W
  } else {
    perm.insert(perm.end(), {ca + 1, ca + 3});  // -> N, C', H, W
  }
  Shape out = lead;
  if (axis == MixAxis::width) {
    out.insert(out.end(), {patches * sub, rest, extent});
  } else {
    out.insert(out.end(), {patches * sub, extent, rest});
  }
  return reshape(permute(reshape(y, split), perm), out);
}

}  // namespace detail

template <class T>
Var<T> fold_width(const Var<T>& x, std::size_t patches) {
  return detail::fold(x, patches, MixAxis::width);
}

template <class T>
Var<T> fold_height(const Var<T>& x, std::size_t patches) {
  return detail::fold(x, patches, MixAxis::height);
}

template <class T>
Var<T> unfold_width(const Var<T>& y, std::size_t width) {
  return detail::unfold(y, width, MixAxis::width);
}

template <class T>
Var<T> unfold_height(const Var<T>& y, std::size_t height) {
  return detail::unfold(y, height, MixAxis::height);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct LinearParams {
  Var<T> weight, bias;
};

/// Depthwise kernel [C, kh, kw] and bias [C].
template <class T>
struct DWConvParams {
  Var<T> weight, bias;
};

template <class T>
struct SDMixerParams {
  MixAxis axis = MixAxis::width;
  std::size_t patches = 1;
  LinearParams<T> lin1, lin2;
  DWConvParams<T> dw;
};

template <class T>
struct ChannelMixerParams {
  std::size_t expansion = 2;
  LinearParams<T> lin1;
  DWConvParams<T> dw;
  LinearParams<T> lin2;
};

/// Two linears with a GELU between: C -> C/r -> out.
template <class T>
struct TinyMlpParams {
  LinearParams<T> lin1, lin2;
};

/// `h` summarizes the height-path features (produces X'_H), `w` the width path.
template <class T>
struct SpatialMixParams {
  TinyMlpParams<T> h, w;
};

template <class T>
struct ChannelMixParams {
  TinyMlpParams<T> mlp;
};

template <class T>
struct DDMParams {
  SDMixerParams<T> sdm_h, sdm_w;
  ChannelMixerParams<T> cm;
  SpatialMixParams<T> smix;
  ChannelMixParams<T> cmix;
};

/// Hyperparameters that fix every DDM tensor shape at one stage.
struct DDMDims {
  std::size_t channels = 8;
  std::size_t patches = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t expansion = 2;  // channel mixer
  std::size_t reduction = 4;  // tiny MLPs

  void validate() const {
    if (patches == 0 || channels % patches != 0) {
      throw ConfigError("channel count " + std::to_string(channels) + " is not divisible by patch count " +
                        std::to_string(patches));
    }
    if (expansion < 1) throw ConfigError("channel mixer expansion must be >= 1");
    if (reduction == 0 || channels / reduction < 1) {
      throw ConfigError("reduction ratio " + std::to_string(reduction) + " leaves no hidden units at " +
                        std::to_string(channels) + " channels");
    }
  }
  std::size_t hidden() const { return channels / reduction; }
};

namespace manifest {

inline void linear(Manifest& m, const std::string& prefix, std::size_t in, std::size_t out,
                   bool zero_weight = false) {
  m.push_back({prefix + ".weight", {out, in}, zero_weight ? Init::zeros : Init::he_uniform, in});
  m.push_back({prefix + ".bias", {out}, Init::zeros, in});
}

inline void dwconv(Manifest& m, const std::string& prefix, std::size_t channels, std::size_t kh, std::size_t kw) {
  m.push_back({prefix + ".weight", {channels, kh, kw}, Init::he_uniform, kh * kw});
  m.push_back({prefix + ".bias", {channels}, Init::zeros, kh * kw});
}

inline void sd_mixer(Manifest& m, const std::string& prefix, std::size_t folded) {
  linear(m, prefix + ".lin1", folded, folded);
  dwconv(m, prefix + ".dw", folded, 1, 3);
  linear(m, prefix + ".lin2", folded, folded);
}

inline void channel_mixer(Manifest& m, const std::string& prefix, std::size_t channels, std::size_t expansion) {
  linear(m, prefix + ".lin1", channels, channels * expansion);
  dwconv(m, prefix + ".dw", channels * expansion, 3, 3);
  linear(m, prefix + ".lin2", channels * expansion, channels);
}

/// Final layer starts at zero so the dynamic mixing begins as identity / uniform fusion.
inline void tiny_mlp(Manifest& m, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out) {
  linear(m, prefix + ".lin1", in, hidden);
  linear(m, prefix + ".lin2", hidden, out, /*zero_weight=*/true);
}

inline void ddm(Manifest& m, const std::string& prefix, const DDMDims& d) {
  d.validate();
  const std::size_t sub = d.channels / d.patches;
  sd_mixer(m, prefix + ".sdm_h", sub * d.height);
  sd_mixer(m, prefix + ".sdm_w", sub * d.width);
  channel_mixer(m, prefix + ".cm", d.channels, d.expansion);
  tiny_mlp(m, prefix + ".smix.h", d.channels, d.hidden(), d.channels);
  tiny_mlp(m, prefix + ".smix.w", d.channels, d.hidden(), d.channels);
  tiny_mlp(m, prefix + ".cmix", d.channels, d.hidden(), 3 * d.channels);
}

}  // namespace manifest

template <class T>
LinearParams<T> bind_linear(Binder<T>& b, const std::string& prefix) {
  return {b(prefix + ".weight"), b(prefix + ".bias")};
}

template <class T>
DWConvParams<T> bind_dwconv(Binder<T>& b, const std::string& prefix) {
  return {b(prefix + ".weight"), b(prefix + ".bias")};
}

template <class T>
SDMixerParams<T> bind_sd_mixer(Binder<T>& b, const std::string& prefix, MixAxis axis, std::size_t patches) {
  SDMixerParams<T> p;
  p.axis = axis;
  p.patches = patches;
  p.lin1 = bind_linear(b, prefix + ".lin1");
  p.dw = bind_dwconv(b, prefix + ".dw");
  p.lin2 = bind_linear(b, prefix + ".lin2");
  return p;
}

template <class T>
ChannelMixerParams<T> bind_channel_mixer(Binder<T>& b, const std::string& prefix, std::size_t expansion) {
  ChannelMixerParams<T> p;
  p.expansion = expansion;
  p.lin1 = bind_linear(b, prefix + ".lin1");
  p.dw = bind_dwconv(b, prefix + ".dw");
  p.lin2 = bind_linear(b, prefix + ".lin2");
  return p;
}

template <class T>
TinyMlpParams<T> bind_tiny_mlp(Binder<T>& b, const std::string& prefix) {
  return {bind_linear(b, prefix + ".lin1"), bind_linear(b, prefix + ".lin2")};
}

template <class T>
DDMParams<T> bind_ddm(Binder<T>& b, const std::string& prefix, const DDMDims& d) {
  DDMParams<T> p;
  p.sdm_h = bind_sd_mixer(b, prefix + ".sdm_h", MixAxis::height, d.patches);
  p.sdm_w = bind_sd_mixer(b, prefix + ".sdm_w", MixAxis::width, d.patches);
  p.cm = bind_channel_mixer(b, prefix + ".cm", d.expansion);
  p.smix.h = bind_tiny_mlp(b, prefix + ".smix.h");
  p.smix.w = bind_tiny_mlp(b, prefix + ".smix.w");
  p.cmix.mlp = bind_tiny_mlp(b, prefix + ".cmix");
  return p;
}

// ---------------------------------------------------------------------------
// Mixers
// ---------------------------------------------------------------------------

template <class T>
Var<T> apply_linear(const Var<T>& x, const LinearParams<T>& p, std::size_t axis) {
  return linear(x, p.weight, p.bias, axis);
}

/// fold -> Linear -> 1x3 DWConv -> GELU -> Linear -> unfold. The linears act on
/// the folded channel extent; the depthwise kernel runs along the remaining
/// spatial axis, never across patches.
template <class T>
Var<T> sd_mixer(const Var<T>& x, const SDMixerParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  const std::size_t ca = detail::channel_axis(x.shape());
  const std::size_t extent = p.axis == MixAxis::width ? x.shape()[ca + 2] : x.shape()[ca + 1];
  Var<T> y = detail::fold(x, p.patches, p.axis);
  y = apply_linear(y, p.lin1, ca);
  y = gelu(dwconv2d(y, p.dw.weight, p.dw.bias), gelu_mode);
  y = apply_linear(y, p.lin2, ca);
  return detail::unfold(y, extent, p.axis);
}

/// Pointwise Linear C -> eC, 3x3 DWConv, GELU, pointwise Linear eC -> C.
template <class T>
Var<T> channel_mixer(const Var<T>& x, const ChannelMixerParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  const std::size_t ca = detail::channel_axis(x.shape());
  Var<T> y = apply_linear(x, p.lin1, ca);
  y = gelu(dwconv2d(y, p.dw.weight, p.dw.bias), gelu_mode);
  return apply_linear(y, p.lin2, ca);
}

template <class T>
Var<T> tiny_mlp(const Var<T>& pooled, const TinyMlpParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  const std::size_t ca = detail::channel_axis(pooled.shape());
  return apply_linear(gelu(apply_linear(pooled, p.lin1, ca), gelu_mode), p.lin2, ca);
}

template <class T>
struct SpatialMixResult {
  Var<T> xh_star, xw_star;
  /// Softmax-normalized similarity maps, shaped like one channel of the input.
  Var<T> score_h, score_w;
};

namespace detail {

/// S = softmax over all H*W positions of sum_c features[c,h,w] * pooled[c].
template <class T>
Var<T> similarity_score(const Var<T>& features, const Var<T>& pooled) {
  const Shape& s = features.shape();
  const std::size_t ca = channel_axis(s);
  Var<T> raw = sum_axis(mul(features, pooled), ca);
  const Shape map_shape = raw.shape();
  const std::size_t lead = ca == 1 ? s[0] : 1;
  return reshape(softmax(reshape(raw, {lead, s[ca + 1] * s[ca + 2]}), 1), map_shape);
}

}  // namespace detail

/// X_H* = X'_W * S_H + X_H with S_H = Softmax(X_H . mean(X_W)), X'_W = MLP(mean(X_W));
/// X_W* mirrors it with the roles of the two paths exchanged.
template <class T>
SpatialMixResult<T> spatial_dynamic_mix(const Var<T>& xh, const Var<T>& xw, const SpatialMixParams<T>& p,
                                        GeluMode gelu_mode = GeluMode::exact) {
  detail::require_same_shape(xh.shape(), xw.shape(), "spatial_dynamic_mix");
  const Var<T> pooled_w = global_avgpool(xw);
  const Var<T> pooled_h = global_avgpool(xh);
  SpatialMixResult<T> r;
  r.score_h = detail::similarity_score(xh, pooled_w);
  r.score_w = detail::similarity_score(xw, pooled_h);
  r.xh_star = add(mul(tiny_mlp(pooled_w, p.w, gelu_mode), r.score_h), xh);
  r.xw_star = add(mul(tiny_mlp(pooled_h, p.h, gelu_mode), r.score_w), xw);
  return r;
}

template <class T>
struct ChannelMixResult {
  Var<T> out;
  /// Branch weights after the softmax, shaped (lead, 3, C); index 0/1/2 = X_H*, X_W*, X_C.
  Var<T> weights;
};

/// W = mean(X_H* + X_W* + X_C), W' = MLP(W) read branch-major as (3, C),
/// softmax over the branch axis, then a per-channel convex combination.
template <class T>
ChannelMixResult<T> channel_dynamic_mix(const Var<T>& xh_star, const Var<T>& xw_star, const Var<T>& xc,
                                        const ChannelMixParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  detail::require_same_shape(xh_star.shape(), xw_star.shape(), "channel_dynamic_mix");
  detail::require_same_shape(xh_star.shape(), xc.shape(), "channel_dynamic_mix");
  const Shape& s = xc.shape();
  const std::size_t ca = detail::channel_axis(s);
  const std::size_t c = s[ca];
  const std::size_t lead = ca == 1 ? s[0] : 1;
  const Var<T> pooled = global_avgpool(add(add(xh_star, xw_star), xc));
  const Var<T> logits = tiny_mlp(pooled, p.mlp, gelu_mode);
  if (logits.shape()[ca] != 3 * c) {
    throw ShapeError("channel_dynamic_mix: tiny MLP must emit 3C = " + std::to_string(3 * c) + " scores");
  }
  ChannelMixResult<T> r;
  r.weights = softmax(reshape(logits, {lead, 3, c}), 1);
  Shape weight_shape = ca == 1 ? Shape{lead, c, 1, 1} : Shape{c, 1, 1};
  auto branch = [&](std::size_t k) { return reshape(slice(r.weights, 1, k, 1), weight_shape); };
  r.out = add(add(mul(xh_star, branch(0)), mul(xw_star, branch(1))), mul(xc, branch(2)));
  return r;
}

template <class T>
struct DDMTrace {
  Var<T> xh, xw, xc;
  SpatialMixResult<T> spatial;
  ChannelMixResult<T> channel;
};

template <class T>
DDMTrace<T> ddm_forward_traced(const Var<T>& x, const DDMParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  DDMTrace<T> t;
  t.xh = sd_mixer(x, p.sdm_h, gelu_mode);
  t.xw = sd_mixer(x, p.sdm_w, gelu_mode);
  t.xc = channel_mixer(x, p.cm, gelu_mode);
  t.spatial = spatial_dynamic_mix(t.xh, t.xw, p.smix, gelu_mode);
  t.channel = channel_dynamic_mix(t.spatial.xh_star, t.spatial.xw_star, t.xc, p.cmix, gelu_mode);
  return t;
}

template <class T>
Var<T> ddm_forward(const Var<T>& x, const DDMParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  return ddm_forward_traced(x, p, gelu_mode).channel.out;
}

}  // namespace d2mlp
