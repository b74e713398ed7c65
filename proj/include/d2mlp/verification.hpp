// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "d2mlp/data.hpp"
#include "d2mlp/ddm.hpp"
#include "d2mlp/gradcheck.hpp"
#include "d2mlp/network.hpp"
#include "d2mlp/ops.hpp"
#include "d2mlp/params.hpp"
#include "d2mlp/training.hpp"

namespace d2mlp {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckCase {
  std::string target;
  std::string name;
  GradcheckResult result;

  bool passed(double tol = kGradcheckTolerance) const { return result.max_rel_error < tol; }
};

namespace verify {

using DVar = Var<double>;
using DTensor = Tensor<double>;

inline DTensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Contracts `out` against a fixed random tensor so every output element
/// carries a distinct weight; plain sums hide softmax and BN gradients.
inline DVar weighted_sum(const DVar& out, std::uint64_t seed) {
  Rng rng(seed, 0x77);
  return sum(mul(out, out.tape().constant(random_tensor(rng, out.shape()))));
}

/// A generic random point: He-initialized tensors get a uniform jitter and
/// zero-initialized ones are redrawn from U(-0.5, 0.5), so no gradient is
/// exactly or nearly zero by construction.
inline ParamStore<double> jittered_params(const Manifest& m, std::uint64_t seed, double jitter = 0.1) {
  ParamStore<double> store = materialize<double>(m, seed);
  Rng rng(seed, 0x6a);
  for (std::size_t k = 0; k < m.size(); ++k) {
    auto& e = store.entries()[k];
    if (!e.trainable) continue;
    const bool redraw = m[k].init == Init::zeros;
    for (auto& v : e.value.data()) v = redraw ? rng.uniform(-0.5, 0.5) : v + rng.uniform(-jitter, jitter);
  }
  return store;
}

/// Module under test: reads its parameters from the binder and maps x to an output.
using ModuleFn = std::function<DVar(Binder<double>&, const DVar&)>;

/// Gradcheck of weighted_sum(module(x)) over x and every trainable tensor of `manifest`.
inline GradcheckResult check_module(const Manifest& manifest, const ModuleFn& module, const DTensor& x,
                                    std::uint64_t seed, std::size_t max_coords = 0) {
  ParamStore<double> store = jittered_params(manifest, seed);
  std::vector<std::string> names;
  std::vector<DTensor> inputs{x};
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    names.push_back(e.name);
    inputs.push_back(e.value);
  }
  ScalarFn f = [&](Tape<double>& tape, std::span<const DVar> v) {
    Binder<double> b(tape, store);
    for (std::size_t i = 0; i < names.size(); ++i) b.bind(names[i], v[i + 1]);
    return weighted_sum(module(b, v[0]), seed);
  };
  GradcheckOptions opt;
  opt.seed = seed;
  opt.max_coords_per_input = max_coords;
  return gradcheck(f, std::move(inputs), opt);
}

inline ScalarFn wsum(std::function<DVar(std::span<const DVar>)> body, std::uint64_t seed) {
  return [body = std::move(body), seed](Tape<double>&, std::span<const DVar> v) { return weighted_sum(body(v), seed); };
}

}  // namespace verify

/// Every differentiable primitive at small random shapes.
inline std::vector<GradcheckCase> gradcheck_ops(std::uint64_t seed) {
  using namespace verify;
  Rng rng(seed, 1);
  std::vector<GradcheckCase> out;
  auto run = [&](const std::string& name, const ScalarFn& f, std::vector<DTensor> inputs) {
    GradcheckOptions opt;
    opt.seed = seed;
    out.push_back({"ops", name, gradcheck(f, std::move(inputs), opt)});
  };
  auto R = [&](Shape s) { return random_tensor(rng, std::move(s)); };

  run("add", wsum([](auto v) { return add(v[0], v[1]); }, seed), {R({2, 3, 4}), R({2, 3, 4})});
  run("mul", wsum([](auto v) { return mul(v[0], v[1]); }, seed), {R({2, 3, 4}), R({2, 3, 4})});
  run("mul_broadcast", wsum([](auto v) { return mul(v[0], v[1]); }, seed), {R({2, 3, 4, 5}), R({2, 3, 1, 1})});
  run("scale", wsum([](auto v) { return scale(v[0], 1.7); }, seed), {R({3, 4})});
  run("sum_axis", wsum([](auto v) { return sum_axis(v[0], 1); }, seed), {R({2, 3, 4})});
  run("mean", [](Tape<double>&, auto v) { return mean(mul(v[0], v[0])); }, {R({3, 5})});
  run("gelu_exact", wsum([](auto v) { return gelu(v[0], GeluMode::exact); }, seed), {R({4, 5})});
  run("gelu_tanh", wsum([](auto v) { return gelu(v[0], GeluMode::tanh); }, seed), {R({4, 5})});
  run("softmax_axis0", wsum([](auto v) { return softmax(v[0], 0); }, seed), {R({3, 4})});
  run("softmax_axis1", wsum([](auto v) { return softmax(v[0], 1); }, seed), {R({2, 5, 3})});
  run("reshape", wsum([](auto v) { return reshape(v[0], {6, 4}); }, seed), {R({2, 3, 4})});
  run("permute", wsum([](auto v) { return permute(v[0], {2, 0, 3, 1}); }, seed), {R({2, 3, 4, 2})});
  run("concat", wsum([](auto v) { return concat({v[0], v[1]}, 1); }, seed), {R({2, 3, 4}), R({2, 2, 4})});
  run("slice", wsum([](auto v) { return slice(v[0], 2, 1, 2); }, seed), {R({2, 3, 4})});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Shape xs{3, 4, 5};
    xs[axis] = 4;
    run("linear_axis" + std::to_string(axis), wsum([axis](auto v) { return linear(v[0], v[1], v[2], axis); }, seed),
        {R(xs), R({6, 4}), R({6})});
  }
  run("dwconv2d_3x3", wsum([](auto v) { return dwconv2d(v[0], v[1], v[2]); }, seed),
      {R({2, 3, 5, 6}), R({3, 3, 3}), R({3})});
  run("dwconv2d_1x3", wsum([](auto v) { return dwconv2d(v[0], v[1], v[2]); }, seed),
      {R({4, 2, 5}), R({4, 1, 3}), R({4})});
  run("conv2d_3x3_s1_p1", wsum([](auto v) { return conv2d(v[0], v[1], v[2], 1, 1); }, seed),
      {R({2, 3, 5, 5}), R({4, 3, 3, 3}), R({4})});
  run("conv2d_2x2_s2", wsum([](auto v) { return conv2d(v[0], v[1], v[2], 2, 0); }, seed),
      {R({2, 3, 6, 4}), R({5, 3, 2, 2}), R({5})});
  run("conv2d_7x7_s2_p3", wsum([](auto v) { return conv2d(v[0], v[1], v[2], 2, 3); }, seed),
      {R({1, 2, 8, 8}), R({3, 2, 7, 7}), R({3})});
  run("tconv2d_2x2_s2", wsum([](auto v) { return tconv2d(v[0], v[1], v[2], 2); }, seed),
      {R({2, 4, 3, 3}), R({4, 3, 2, 2}), R({3})});
  for (BNMode mode : {BNMode::train, BNMode::eval}) {
    auto rm = std::make_shared<DTensor>(R({3}));
    auto rv = std::make_shared<DTensor>(random_tensor(rng, {3}, 0.5, 1.5));
    run(mode == BNMode::train ? "batchnorm2d_train" : "batchnorm2d_eval",
        wsum(
            [rm, rv, mode](auto v) {
              BatchNorm<double> bn{v[1], v[2], rm.get(), rv.get()};
              return batchnorm2d(v[0], bn, mode);
            },
            seed),
        {R({2, 3, 4, 3}), R({3}), R({3})});
  }
  run("global_avgpool", wsum([](auto v) { return global_avgpool(v[0]); }, seed), {R({2, 3, 4, 5})});
  run("fold_width", wsum([](auto v) { return fold_width(v[0], 2); }, seed), {R({2, 4, 3, 5})});
  run("unfold_height", wsum([](auto v) { return unfold_height(v[0], 3); }, seed), {R({2, 6, 2, 5})});

  LabelMap labels({2, 4, 5});
  for (auto& l : labels.data()) l = static_cast<std::uint8_t>(rng.below(3));
  run("ce_loss", [labels](Tape<double>&, auto v) { return ce_loss(v[0], labels); }, {R({2, 3, 4, 5})});
  for (DiceDenominator d : {DiceDenominator::squared, DiceDenominator::linear}) {
    run("dice_loss_" + to_string(d), [labels, d](Tape<double>&, auto v) { return dice_loss(v[0], labels, 1e-5, d); },
        {R({2, 3, 4, 5})});
  }
  return out;
}

/// The full DDM and its parts at C=8, N=2, H=W=6.
inline std::vector<GradcheckCase> gradcheck_ddm(std::uint64_t seed) {
  using namespace verify;
  const DDMDims d{8, 2, 6, 6, 2, 4};
  Rng rng(seed, 2);
  const DTensor x = random_tensor(rng, {2, d.channels, d.height, d.width});
  std::vector<GradcheckCase> out;
  auto module = [&](const std::string& name, const Manifest& m, const ModuleFn& fn) {
    out.push_back({"ddm", name, check_module(m, fn, x, seed)});
  };
  const std::size_t sub = d.channels / d.patches;
  Manifest m_h, m_w, m_cm, m_all;
  manifest::sd_mixer(m_h, "p", sub * d.height);
  manifest::sd_mixer(m_w, "p", sub * d.width);
  manifest::channel_mixer(m_cm, "p", d.channels, d.expansion);
  manifest::ddm(m_all, "p", d);
  module("sd_mixer_height", m_h, [&](Binder<double>& b, const DVar& v) {
    return sd_mixer(v, bind_sd_mixer(b, "p", MixAxis::height, d.patches));
  });
  module("sd_mixer_width", m_w, [&](Binder<double>& b, const DVar& v) {
    return sd_mixer(v, bind_sd_mixer(b, "p", MixAxis::width, d.patches));
  });
  module("channel_mixer", m_cm,
         [&](Binder<double>& b, const DVar& v) { return channel_mixer(v, bind_channel_mixer(b, "p", d.expansion)); });
  module("ddm", m_all, [&](Binder<double>& b, const DVar& v) { return ddm_forward(v, bind_ddm(b, "p", d)); });
  return out;
}

/// Mixer blocks of both variants and the channel MLP.
inline std::vector<GradcheckCase> gradcheck_block(std::uint64_t seed) {
  using namespace verify;
  std::vector<GradcheckCase> out;
  Rng rng(seed, 3);
  {
    Manifest m;
    manifest::linear(m, "mlp.lin1", 4, 16);
    manifest::linear(m, "mlp.lin2", 16, 4);
    const DTensor x = random_tensor(rng, {1, 4, 5, 5});
    out.push_back({"block", "channel_mlp",
                   check_module(
                       m,
                       [](Binder<double>& b, const DVar& v) {
                         return channel_mlp(v, ChannelMlpParams<double>{bind_linear(b, "mlp.lin1"),
                                                                        bind_linear(b, "mlp.lin2")});
                       },
                       x, seed)});
  }
  for (Variant variant : {Variant::ddm, Variant::basic_mixer}) {
    NetworkConfig cfg;
    cfg.base_channels = 8;
    cfg.patch_count = 2;
    cfg.variant = variant;
    Manifest m;
    manifest::mixer_block(m, cfg, "enc0", 0, 8, 6, 6);
    const DTensor x = random_tensor(rng, {1, 8, 6, 6});
    for (BNMode mode : {BNMode::train, BNMode::eval}) {
      out.push_back({"block",
                     "mixer_block_" + to_string(variant) + (mode == BNMode::train ? "_train" : "_eval"),
                     check_module(
                         m,
                         [&cfg, mode](Binder<double>& b, const DVar& v) {
                           return mixer_block(v, bind_mixer_block(b, cfg, "enc0", 0, 8, 6, 6), mode, cfg.gelu_mode());
                         },
                         x, seed)});
    }
  }
  return out;
}

/// combined_loss over the full tiny network (C=8, N=2, 64x64, 2 classes, deep supervision).
/// Every tensor is probed along seeded random directions, which covers all of
/// its coordinates at two evaluations per probe. The parameter case gates on the
/// error over the whole parameter vector: at this depth the spatial-mixing
/// tensors carry gradients near the finite-difference rounding floor, and they
/// are checked tensor by tensor in gradcheck_ddm and gradcheck_block.
inline std::vector<GradcheckCase> gradcheck_network(std::uint64_t seed, std::size_t probes_per_param = 1,
                                                    std::size_t input_probes = 4) {
  using namespace verify;
  NetworkConfig cfg;
  cfg.base_channels = 8;
  cfg.patch_count = 2;
  cfg.num_classes = 2;
  cfg.image_height = cfg.image_width = 64;
  cfg.deep_supervision = true;
  const SampleBatch data = synth_generate(seed, 2, 64, 2);
  const DTensor x = data.images.cast<double>();
  const TrainConfig tc;
  ParamStore<double> store = jittered_params(network_manifest(cfg), seed);
  std::vector<std::string> names;
  std::vector<DTensor> params;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    names.push_back(e.name);
    params.push_back(e.value);
  }
  const LabelMap labels = data.labels;
  auto loss = [&](Tape<double>& tape, std::span<const DVar> v, std::size_t offset) {
    Binder<double> b(tape, store);
    for (std::size_t i = 0; i < names.size(); ++i) b.bind(names[i], v[i + offset]);
    return combined_loss(forward(b, cfg, v[0], BNMode::train), labels, tc);
  };
  std::vector<GradcheckCase> out;
  {
    std::vector<DTensor> inputs{x};
    ScalarFn f = [&](Tape<double>& tape, std::span<const DVar> v) {
      std::vector<DVar> all{v[0]};
      for (const auto& p : params) all.push_back(tape.constant(p));
      return loss(tape, all, 1);
    };
    GradcheckOptions opt;
    opt.seed = seed;
    opt.mode = GradcheckMode::directions;
    opt.directions_per_input = input_probes;
    out.push_back({"network", "input", gradcheck(f, std::move(inputs), opt)});
  }
  {
    std::vector<DTensor> inputs = params;
    ScalarFn f = [&](Tape<double>& tape, std::span<const DVar> v) {
      std::vector<DVar> all{tape.constant(x)};
      all.insert(all.end(), v.begin(), v.end());
      return loss(tape, all, 1);
    };
    GradcheckOptions opt;
    opt.seed = seed;
    opt.mode = GradcheckMode::directions;
    opt.directions_per_input = probes_per_param;
    opt.joint = true;
    out.push_back({"network", "parameters", gradcheck(f, std::move(inputs), opt)});
  }
  return out;
}

inline const std::vector<std::string>& gradcheck_targets() {
  static const std::vector<std::string> t{"ops", "ddm", "block", "network"};
  return t;
}

inline std::vector<GradcheckCase> run_gradcheck(const std::string& target, std::uint64_t seed) {
  if (target == "ops") return gradcheck_ops(seed);
  if (target == "ddm") return gradcheck_ddm(seed);
  if (target == "block") return gradcheck_block(seed);
  if (target == "network") return gradcheck_network(seed);
  throw ConfigError("unknown gradcheck target '" + target + "'");
}

}  // namespace d2mlp
