// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "d2mlp/ddm.hpp"
#include "d2mlp/ops.hpp"
#include "d2mlp/params.hpp"

namespace d2mlp {

enum class Variant { ddm, basic_mixer };

inline std::string to_string(Variant v) { return v == Variant::ddm ? "ddm" : "basic_mixer"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "ddm") return Variant::ddm;
  if (s == "basic_mixer") return Variant::basic_mixer;
  throw ConfigError("unknown network variant '" + s + "' (expected ddm or basic_mixer)");
}

inline constexpr std::size_t kStages = 4;
inline constexpr std::size_t kSpatialDivisor = 32;

/// Auxiliary decoder heads: dec0 (H/2) and dec1 (H/4), weighted after the main head.
inline constexpr std::array<double, 3> kDeepSupervisionWeights = {1.0, 0.5, 0.25};

struct NetworkConfig {
  std::size_t base_channels = 48;
  std::size_t patch_count = 4;
  std::size_t blocks_per_stage = 2;
  std::size_t channel_mlp_expansion = 4;
  std::size_t mixer_expansion = 2;
  std::size_t reduction = 4;
  std::size_t num_classes = 2;
  std::size_t in_channels = 1;
  std::size_t image_height = 512;
  std::size_t image_width = 512;
  Variant variant = Variant::ddm;
  bool deep_supervision = true;
  bool gelu_tanh = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  GeluMode gelu_mode() const { return gelu_tanh ? GeluMode::tanh : GeluMode::exact; }

  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }

  void validate() const {
    if (image_height == 0 || image_width == 0 || image_height % kSpatialDivisor || image_width % kSpatialDivisor) {
      throw ShapeError("input height and width must be divisible by 32, got " + std::to_string(image_height) + "x" +
                       std::to_string(image_width));
    }
    if (base_channels == 0) throw ConfigError("base_channels must be positive");
    if (patch_count == 0 || base_channels % patch_count != 0) {
      throw ConfigError("base_channels " + std::to_string(base_channels) + " must be divisible by patch_count " +
                        std::to_string(patch_count));
    }
    if (reduction == 0 || base_channels / reduction < 1) {
      throw ConfigError("base_channels must be at least the reduction ratio");
    }
    if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
    if (channel_mlp_expansion == 0 || mixer_expansion == 0) throw ConfigError("expansion ratios must be >= 1");
    if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (!(bn_eps > 0) || !(bn_momentum >= 0 && bn_momentum <= 1)) throw ConfigError("invalid batch-norm constants");
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"patch_count", c.patch_count},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"channel_mlp_expansion", c.channel_mlp_expansion},
                     {"mixer_expansion", c.mixer_expansion},
                     {"reduction", c.reduction},
                     {"num_classes", c.num_classes},
                     {"in_channels", c.in_channels},
                     {"image_height", c.image_height},
                     {"image_width", c.image_width},
                     {"variant", to_string(c.variant)},
                     {"deep_supervision", c.deep_supervision},
                     {"gelu_tanh", c.gelu_tanh},
                     {"bn_eps", c.bn_eps},
                     {"bn_momentum", c.bn_momentum}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    if (k == "base_channels") d.base_channels = v.get<std::size_t>();
    else if (k == "patch_count") d.patch_count = v.get<std::size_t>();
    else if (k == "blocks_per_stage") d.blocks_per_stage = v.get<std::size_t>();
    else if (k == "channel_mlp_expansion") d.channel_mlp_expansion = v.get<std::size_t>();
    else if (k == "mixer_expansion") d.mixer_expansion = v.get<std::size_t>();
    else if (k == "reduction") d.reduction = v.get<std::size_t>();
    else if (k == "num_classes") d.num_classes = v.get<std::size_t>();
    else if (k == "in_channels") d.in_channels = v.get<std::size_t>();
    else if (k == "image_height") d.image_height = v.get<std::size_t>();
    else if (k == "image_width") d.image_width = v.get<std::size_t>();
    else if (k == "variant") d.variant = parse_variant(v.get<std::string>());
    else if (k == "deep_supervision") d.deep_supervision = v.get<bool>();
    else if (k == "gelu_tanh") d.gelu_tanh = v.get<bool>();
    else if (k == "bn_eps") d.bn_eps = v.get<double>();
    else if (k == "bn_momentum") d.bn_momentum = v.get<double>();
    else throw ConfigError("unknown network config key '" + k + "'");
  }
  c = d;
}

/// Feature extent after a named stage of the forward pass.
struct StageShape {
  std::string name;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  friend bool operator==(const StageShape&, const StageShape&) = default;
};

inline std::string encoder_name(std::size_t i) { return "enc" + std::to_string(i); }
inline std::string decoder_name(std::size_t i) { return "dec" + std::to_string(i); }
inline std::string block_name(const std::string& stage, std::size_t block) { return stage + "." + std::to_string(block); }

/// Stage trace implied by the layout rules alone, without touching parameters.
inline std::vector<StageShape> plan_stages(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<StageShape> out;
  const std::size_t H = cfg.image_height, W = cfg.image_width;
  out.push_back({"stem", cfg.base_channels, H / 2, W / 2});
  for (std::size_t i = 0; i < kStages; ++i) {
    out.push_back({encoder_name(i), cfg.stage_channels(i), H >> (i + 1), W >> (i + 1)});
  }
  out.push_back({"bottleneck", cfg.stage_channels(kStages), H >> (kStages + 1), W >> (kStages + 1)});
  for (std::size_t i = kStages; i-- > 0;) {
    out.push_back({decoder_name(i), cfg.stage_channels(i), H >> (i + 1), W >> (i + 1)});
  }
  out.push_back({"dec_stem", cfg.base_channels, H, W});
  out.push_back({"head", cfg.num_classes, H, W});
  return out;
}

namespace manifest {

inline void batchnorm(Manifest& m, const std::string& prefix, std::size_t c) {
  m.push_back({prefix + ".weight", {c}, Init::ones, 1});
  m.push_back({prefix + ".bias", {c}, Init::zeros, 1});
  m.push_back({prefix + ".running_mean", {c}, Init::zeros, 1, false});
  m.push_back({prefix + ".running_var", {c}, Init::ones, 1, false});
}

inline void conv(Manifest& m, const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k) {
  m.push_back({prefix + ".weight", {cout, cin, k, k}, Init::he_uniform, cin * k * k});
  m.push_back({prefix + ".bias", {cout}, Init::zeros, 1});
}

/// Transposed conv weights are [Cin, Cout, k, k]; with k == stride each output
/// pixel receives Cin terms, which is the fan-in used.
inline void tconv(Manifest& m, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k) {
  m.push_back({prefix + ".weight", {cin, cout, k, k}, Init::he_uniform, cin});
  m.push_back({prefix + ".bias", {cout}, Init::zeros, 1});
}

inline void mixer_block(Manifest& m, const NetworkConfig& cfg, const std::string& stage, std::size_t block,
                        std::size_t c, std::size_t h, std::size_t w) {
  const std::string id = block_name(stage, block);
  batchnorm(m, "norm." + id + ".bn1", c);
  if (cfg.variant == Variant::ddm) {
    ddm(m, "ddm." + id, DDMDims{c, cfg.patch_count, h, w, cfg.mixer_expansion, cfg.reduction});
  } else {
    channel_mixer(m, "mixer." + id + ".cm", c, cfg.mixer_expansion);
  }
  batchnorm(m, "norm." + id + ".bn2", c);
  linear(m, "mlp." + id + ".lin1", c, c * cfg.channel_mlp_expansion);
  linear(m, "mlp." + id + ".lin2", c * cfg.channel_mlp_expansion, c);
}

}  // namespace manifest

/// Every tensor of the network in forward-execution order.
inline Manifest network_manifest(const NetworkConfig& cfg) {
  cfg.validate();
  Manifest m;
  const std::size_t H = cfg.image_height, W = cfg.image_width;
  manifest::conv(m, "stem", cfg.base_channels, cfg.in_channels, 7);
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t c = cfg.stage_channels(i);
    for (std::size_t j = 0; j < cfg.blocks_per_stage; ++j) {
      manifest::mixer_block(m, cfg, encoder_name(i), j, c, H >> (i + 1), W >> (i + 1));
    }
    manifest::conv(m, encoder_name(i) + ".down", 2 * c, c, 2);
  }
  for (std::size_t j = 0; j < cfg.blocks_per_stage; ++j) {
    manifest::mixer_block(m, cfg, "bottleneck", j, cfg.stage_channels(kStages), H >> (kStages + 1),
                          W >> (kStages + 1));
  }
  for (std::size_t i = kStages; i-- > 0;) {
    const std::size_t c = cfg.stage_channels(i);
    manifest::tconv(m, decoder_name(i) + ".up", 2 * c, c, 2);
    manifest::conv(m, decoder_name(i) + ".fuse", c, 2 * c, 1);
    for (std::size_t j = 0; j < cfg.blocks_per_stage; ++j) {
      manifest::mixer_block(m, cfg, decoder_name(i), j, c, H >> (i + 1), W >> (i + 1));
    }
  }
  manifest::tconv(m, "dec_stem", cfg.base_channels, cfg.base_channels, 2);
  manifest::conv(m, "head", cfg.num_classes, cfg.base_channels, 1);
  if (cfg.deep_supervision) {
    manifest::conv(m, "aux.dec0", cfg.num_classes, cfg.stage_channels(0), 1);
    manifest::conv(m, "aux.dec1", cfg.num_classes, cfg.stage_channels(1), 1);
  }
  return m;
}

inline std::size_t param_count(const NetworkConfig& cfg) { return manifest_numel(network_manifest(cfg)); }

template <class T>
struct NetworkParams {
  NetworkConfig config;
  ParamStore<T> store;
};

template <class T>
NetworkParams<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  return {cfg, materialize<T>(network_manifest(cfg), seed)};
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <class T>
struct ChannelMlpParams {
  LinearParams<T> lin1, lin2;
};

/// Pointwise Linear C -> eC, GELU, Linear eC -> C. The residual is the caller's.
template <class T>
Var<T> channel_mlp(const Var<T>& x, const ChannelMlpParams<T>& p, GeluMode gelu_mode = GeluMode::exact) {
  const std::size_t ca = detail::channel_axis(x.shape());
  return apply_linear(gelu(apply_linear(x, p.lin1, ca), gelu_mode), p.lin2, ca);
}

template <class T>
struct MixerBlockParams {
  Variant variant = Variant::ddm;
  BatchNorm<T> bn1, bn2;
  DDMParams<T> ddm;
  ChannelMixerParams<T> basic;
  ChannelMlpParams<T> mlp;
};

template <class T>
BatchNorm<T> bind_batchnorm(Binder<T>& b, const std::string& prefix, const NetworkConfig& cfg) {
  BatchNorm<T> bn;
  bn.gamma = b(prefix + ".weight");
  bn.beta = b(prefix + ".bias");
  bn.running_mean = &b.buffer(prefix + ".running_mean");
  bn.running_var = &b.buffer(prefix + ".running_var");
  bn.momentum = cfg.bn_momentum;
  bn.eps = cfg.bn_eps;
  return bn;
}

template <class T>
MixerBlockParams<T> bind_mixer_block(Binder<T>& b, const NetworkConfig& cfg, const std::string& stage,
                                     std::size_t block, std::size_t c, std::size_t h, std::size_t w) {
  const std::string id = block_name(stage, block);
  MixerBlockParams<T> p;
  p.variant = cfg.variant;
  p.bn1 = bind_batchnorm(b, "norm." + id + ".bn1", cfg);
  if (cfg.variant == Variant::ddm) {
    p.ddm = bind_ddm(b, "ddm." + id, DDMDims{c, cfg.patch_count, h, w, cfg.mixer_expansion, cfg.reduction});
  } else {
    p.basic = bind_channel_mixer(b, "mixer." + id + ".cm", cfg.mixer_expansion);
  }
  p.bn2 = bind_batchnorm(b, "norm." + id + ".bn2", cfg);
  p.mlp.lin1 = bind_linear(b, "mlp." + id + ".lin1");
  p.mlp.lin2 = bind_linear(b, "mlp." + id + ".lin2");
  return p;
}

/// X^ = DDM(BN(X)) + X;  out = MLP(BN(X^)) + X^.  The basic-mixer variant
/// uses a channel mixer where the DDM would be.
template <class T>
Var<T> mixer_block(const Var<T>& x, const MixerBlockParams<T>& p, BNMode mode, GeluMode gelu_mode = GeluMode::exact) {
  const Var<T> normed = batchnorm2d(x, p.bn1, mode);
  const Var<T> mixed =
      p.variant == Variant::ddm ? ddm_forward(normed, p.ddm, gelu_mode) : channel_mixer(normed, p.basic, gelu_mode);
  const Var<T> hidden = add(mixed, x);
  return add(channel_mlp(batchnorm2d(hidden, p.bn2, mode), p.mlp, gelu_mode), hidden);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class T>
struct ForwardResult {
  Var<T> logits;
  /// Deep-supervision logits: [0] at H/2 (dec0), [1] at H/4 (dec1). Empty when disabled.
  std::vector<Var<T>> aux;
  std::vector<StageShape> trace;
};

namespace detail {
template <class T>
StageShape stage_of(const std::string& name, const Var<T>& v) {
  const Shape& s = v.shape();
  return {name, s[1], s[2], s[3]};
}

template <class T>
Var<T> conv_layer(Binder<T>& b, const std::string& prefix, const Var<T>& x, std::size_t stride, std::size_t pad) {
  return conv2d(x, b(prefix + ".weight"), b(prefix + ".bias"), stride, pad);
}

template <class T>
Var<T> tconv_layer(Binder<T>& b, const std::string& prefix, const Var<T>& x) {
  return tconv2d(x, b(prefix + ".weight"), b(prefix + ".bias"), 2);
}
}  // namespace detail

/// x: (B, in_channels, H, W) -> logits (B, num_classes, H, W).
template <class T>
ForwardResult<T> forward(Binder<T>& b, const NetworkConfig& cfg, const Var<T>& x, BNMode mode) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("forward: expected (B, C, H, W) input, got " + to_string(s));
  if (s[2] % kSpatialDivisor || s[3] % kSpatialDivisor) {
    throw ShapeError("forward: input height and width must be divisible by 32, got " + to_string(s));
  }
  if (s[1] != cfg.in_channels || s[2] != cfg.image_height || s[3] != cfg.image_width) {
    throw ShapeError("forward: network was built for " + std::to_string(cfg.in_channels) + "x" +
                     std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width) + " inputs, got " +
                     to_string(s));
  }
  const GeluMode gm = cfg.gelu_mode();
  ForwardResult<T> r;
  auto blocks = [&](Var<T> h, const std::string& stage) {
    const Shape& hs = h.shape();
    for (std::size_t j = 0; j < cfg.blocks_per_stage; ++j) {
      h = mixer_block(h, bind_mixer_block(b, cfg, stage, j, hs[1], hs[2], hs[3]), mode, gm);
    }
    return h;
  };

  Var<T> h = detail::conv_layer(b, "stem", x, 2, 3);
  r.trace.push_back(detail::stage_of("stem", h));
  std::array<Var<T>, kStages> skips;
  for (std::size_t i = 0; i < kStages; ++i) {
    h = blocks(h, encoder_name(i));
    skips[i] = h;
    r.trace.push_back(detail::stage_of(encoder_name(i), h));
    h = detail::conv_layer(b, encoder_name(i) + ".down", h, 2, 0);
  }
  h = blocks(h, "bottleneck");
  r.trace.push_back(detail::stage_of("bottleneck", h));
  std::array<Var<T>, 2> aux;
  for (std::size_t i = kStages; i-- > 0;) {
    const std::string name = decoder_name(i);
    h = detail::tconv_layer(b, name + ".up", h);
    if (h.shape() != skips[i].shape()) {
      throw ShapeError("forward: decoder " + name + " produced " + to_string(h.shape()) + " but skip is " +
                       to_string(skips[i].shape()));
    }
    h = detail::conv_layer(b, name + ".fuse", concat({h, skips[i]}, 1), 1, 0);
    h = blocks(h, name);
    r.trace.push_back(detail::stage_of(name, h));
    if (cfg.deep_supervision && i < 2) aux[i] = detail::conv_layer(b, "aux." + name, h, 1, 0);
  }
  h = detail::tconv_layer(b, "dec_stem", h);
  r.trace.push_back(detail::stage_of("dec_stem", h));
  r.logits = detail::conv_layer(b, "head", h, 1, 0);
  r.trace.push_back(detail::stage_of("head", r.logits));
  if (cfg.deep_supervision) r.aux = {aux[0], aux[1]};
  return r;
}

/// Eval-mode logits without gradients.
template <class T>
Tensor<T> predict_logits(NetworkParams<T>& net, const Tensor<T>& images) {
  Tape<T> tape;
  Binder<T> b(tape, net.store, /*requires_grad=*/false);
  return forward(b, net.config, tape.constant(images), BNMode::eval).logits.value();
}

/// Per-pixel argmax over classes; ties resolve to the lowest class id.
template <class T>
LabelMap argmax_classes(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 4) throw ShapeError("argmax_classes: expected (B, K, H, W)");
  const std::size_t hw = s[2] * s[3];
  LabelMap out({s[0], s[2], s[3]});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      T best_v = logits[(n * s[1]) * hw + i];
      for (std::size_t k = 1; k < s[1]; ++k) {
        const T v = logits[(n * s[1] + k) * hw + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out[n * hw + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace d2mlp
