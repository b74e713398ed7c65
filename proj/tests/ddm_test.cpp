// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "d2mlp/ddm.hpp"
#include "d2mlp/verification.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace d2mlp {
namespace {

using testing::random_tensor;

using testing::fold_height_oracle;
using testing::fold_width_oracle;

TEST(Fold, MatchesIndexOracleAndInvertsBitwise) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = 1 + rng.below(4);
    const std::size_t C = N * (1 + rng.below(4)), H = 1 + rng.below(7), W = 1 + rng.below(7);
    const auto x = random_tensor(rng, {C, H, W});
    Tape<float> tape;
    const auto v = tape.leaf(x);
    const auto fw = fold_width(v, N);
    const auto fh = fold_height(v, N);
    ASSERT_EQ(fw.value(), fold_width_oracle(x, N)) << "trial " << trial;
    ASSERT_EQ(fh.value(), fold_height_oracle(x, N)) << "trial " << trial;
    ASSERT_EQ(unfold_width(fw, W).value(), x) << "trial " << trial;
    ASSERT_EQ(unfold_height(fh, H).value(), x) << "trial " << trial;
  }
}

TEST(Fold, BatchedFoldActsPerSample) {
  Rng rng(32);
  const auto x = random_tensor(rng, {3, 6, 4, 5});
  Tape<float> tape;
  const auto y = fold_width(tape.leaf(x), 3).value();
  ASSERT_EQ(y.shape(), (Shape{3, 10, 3, 4}));
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor<float> xn({6, 4, 5}, std::vector<float>(x.raw() + n * 120, x.raw() + (n + 1) * 120));
    const auto want = fold_width_oracle(xn, 3);
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_EQ(y[n * 120 + i], want[i]);
  }
}

TEST(Fold, HandExample) {
  // C=2, N=2, H=1, W=2: each slab holds one channel.
  Tensor<float> x({2, 1, 2}, {1, 2, 3, 4});
  Tape<float> tape;
  const auto y = fold_width(tape.leaf(x), 2).value();
  EXPECT_EQ(y.shape(), (Shape{2, 2, 1}));
  EXPECT_EQ(y.storage(), (std::vector<float>{1, 3, 2, 4}));
}

TEST(Fold, RejectsIndivisibleChannels) {
  Tape<float> tape;
  const auto v = tape.leaf(Tensor<float>({6, 2, 2}));
  EXPECT_THROW(fold_width(v, 4), ShapeError);
  EXPECT_THROW(fold_height(v, 0), ShapeError);
  EXPECT_THROW(unfold_width(tape.leaf(Tensor<float>({6, 2, 2})), 4), ShapeError);
}

struct DdmFixture {
  DDMDims dims{8, 2, 6, 6, 2, 4};
  ParamStore<double> store;
  Tape<double> tape;
  Binder<double> binder{tape, store};

  explicit DdmFixture(bool zero_tiny_heads, std::uint64_t seed = 0) {
    Manifest m;
    manifest::ddm(m, "p", dims);
    store = zero_tiny_heads ? materialize<double>(m, seed) : verify::jittered_params(m, seed);
  }
};

TEST(DynamicMixing, SpatialScoresAndBranchWeightsAreNormalized) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    DdmFixture f(false, seed);
    Rng rng(seed, 9);
    const auto x = f.tape.leaf(random_tensor<double>(rng, {2, 8, 6, 6}, -2, 2));
    const auto t = ddm_forward_traced(x, bind_ddm(f.binder, "p", f.dims));
    for (const auto* s : {&t.spatial.score_h, &t.spatial.score_w}) {
      const auto& v = s->value();
      ASSERT_EQ(v.shape(), (Shape{2, 1, 6, 6}));
      for (std::size_t n = 0; n < 2; ++n) {
        double total = 0;
        for (std::size_t i = 0; i < 36; ++i) total += v[n * 36 + i];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
    const auto& w = t.channel.weights.value();
    ASSERT_EQ(w.shape(), (Shape{2, 3, 8}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(w.at({n, 0, c}) + w.at({n, 1, c}) + w.at({n, 2, c}), 1.0, 1e-6);
      }
  }
}

TEST(DynamicMixing, FloatScoresAreNormalized) {
  Manifest m;
  const DDMDims d{16, 4, 8, 8, 2, 4};
  manifest::ddm(m, "p", d);
  ParamStore<float> store = verify::jittered_params(m, 3).cast<float>();
  Tape<float> tape;
  Binder<float> b(tape, store);
  Rng rng(4);
  const auto t = ddm_forward_traced(tape.leaf(random_tensor(rng, {1, 16, 8, 8})), bind_ddm(b, "p", d));
  double total = 0;
  for (float v : t.spatial.score_h.value().data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-6);
  const auto& w = t.channel.weights.value();
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(w.at({0, 0, c}) + w.at({0, 1, c}) + w.at({0, 2, c}), 1.0, 1e-6);
}

TEST(DynamicMixing, ZeroInitSpatialMixIsIdentityAndChannelMixIsMean) {
  DdmFixture f(true);
  Rng rng(33);
  const auto x = f.tape.leaf(random_tensor<double>(rng, {2, 8, 6, 6}));
  const auto t = ddm_forward_traced(x, bind_ddm(f.binder, "p", f.dims));
  EXPECT_EQ(t.spatial.xh_star.value(), t.xh.value());
  EXPECT_EQ(t.spatial.xw_star.value(), t.xw.value());
  for (double w : t.channel.weights.value().data()) EXPECT_EQ(w, 1.0 / 3.0);
  const auto& out = t.channel.out.value();
  const auto &a = t.xh.value(), &b = t.xw.value(), &c = t.xc.value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], (a[i] + b[i] + c[i]) / 3.0, 1e-15);
}

TEST(DynamicMixing, ZeroInitHoldsInFloat) {
  Manifest m;
  const DDMDims d{8, 2, 6, 6, 2, 4};
  manifest::ddm(m, "p", d);
  ParamStore<float> store = materialize<float>(m, 5);
  Tape<float> tape;
  Binder<float> b(tape, store);
  Rng rng(34);
  const auto t = ddm_forward_traced(tape.leaf(random_tensor(rng, {8, 6, 6})), bind_ddm(b, "p", d));
  EXPECT_EQ(t.spatial.xh_star.value(), t.xh.value());
  EXPECT_EQ(t.spatial.xw_star.value(), t.xw.value());
  const auto& out = t.channel.out.value();
  const auto &xa = t.xh.value(), &xb = t.xw.value(), &xc = t.xc.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NEAR(out[i], (double(xa[i]) + xb[i] + xc[i]) / 3.0, 1e-6 * (1 + std::abs(out[i])));
  }
}

TEST(Ddm, PreservesShapeAcrossConfigs) {
  Rng rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = std::size_t{1} << rng.below(3);
    const std::size_t C = N * 4 * (1 + rng.below(2));
    const DDMDims d{C, N, 2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(3), 4};
    Manifest m;
    manifest::ddm(m, "p", d);
    ParamStore<float> store = materialize<float>(m, trial);
    Tape<float> tape;
    Binder<float> b(tape, store);
    const Shape s{1 + rng.below(2), C, d.height, d.width};
    const auto y = ddm_forward(tape.leaf(random_tensor(rng, s)), bind_ddm(b, "p", d));
    EXPECT_EQ(y.shape(), s);
  }
}

TEST(Ddm, ManifestShapes) {
  Manifest m;
  manifest::ddm(m, "x", DDMDims{8, 2, 16, 32, 2, 4});
  auto find = [&](const std::string& n) -> const ParamSpec& {
    for (const auto& p : m)
      if (p.name == n) return p;
    throw std::runtime_error("missing " + n);
  };
  EXPECT_EQ(find("x.sdm_h.lin1.weight").shape, (Shape{64, 64}));  // C' * H = 4 * 16
  EXPECT_EQ(find("x.sdm_w.lin2.weight").shape, (Shape{128, 128}));  // C' * W = 4 * 32
  EXPECT_EQ(find("x.sdm_w.dw.weight").shape, (Shape{128, 1, 3}));
  EXPECT_EQ(find("x.cm.lin1.weight").shape, (Shape{16, 8}));
  EXPECT_EQ(find("x.cm.dw.weight").shape, (Shape{16, 3, 3}));
  EXPECT_EQ(find("x.cm.lin2.weight").shape, (Shape{8, 16}));
  EXPECT_EQ(find("x.smix.h.lin1.weight").shape, (Shape{2, 8}));
  EXPECT_EQ(find("x.smix.h.lin2.weight").shape, (Shape{8, 2}));
  EXPECT_EQ(find("x.cmix.lin2.weight").shape, (Shape{24, 2}));
  EXPECT_EQ(find("x.cmix.lin2.weight").init, Init::zeros);
  EXPECT_EQ(find("x.smix.w.lin2.weight").init, Init::zeros);
  EXPECT_THROW(manifest::ddm(m, "y", DDMDims{6, 4, 4, 4, 2, 4}), ConfigError);
  EXPECT_THROW(manifest::ddm(m, "z", DDMDims{2, 2, 4, 4, 2, 4}), ConfigError);
}

TEST(Ddm, SubModulesPassGradcheck) {
  for (const auto& c : gradcheck_ddm(0)) {
    EXPECT_TRUE(c.passed()) << c.name << " rel error " << c.result.max_rel_error;
  }
}

TEST(Ddm, SubModulesPassGradcheckSecondSeed) {
  for (const auto& c : gradcheck_ddm(1)) {
    EXPECT_TRUE(c.passed()) << c.name << " rel error " << c.result.max_rel_error;
  }
}

}  // namespace
}  // namespace d2mlp
