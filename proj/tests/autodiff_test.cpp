// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "d2mlp/gradcheck.hpp"
#include "d2mlp/ops.hpp"
#include "d2mlp/verification.hpp"
#include "test_util.hpp"

namespace d2mlp {
namespace {

struct FaultGuard {
  explicit FaultGuard(double s) { fault::gelu_backward_scale() = s; }
  ~FaultGuard() { fault::gelu_backward_scale() = 1.0; }
};

TEST(Tape, ReusedValueAccumulatesGradient) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>({3}, {1.0, -2.0, 0.5}), true);
  const auto y = sum(add(mul(x, x), scale(x, 3.0)));
  tape.backward(y);
  const Tensor<double>* g = tape.grad(x);
  ASSERT_NE(g, nullptr);
  EXPECT_EQ(g->storage(), (std::vector<double>{5.0, -1.0, 4.0}));
}

TEST(Tape, UnreachableAndConstantLeavesHaveNoGradient) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>({2}, 1.0), true);
  const auto c = tape.constant(Tensor<double>({2}, 2.0));
  const auto unused = tape.leaf(Tensor<double>({2}, 1.0), true);
  tape.backward(sum(mul(x, c)));
  EXPECT_EQ(tape.grad(c), nullptr);
  EXPECT_EQ(tape.grad(unused), nullptr);
  EXPECT_EQ(tape.grad_or_zeros(unused), Tensor<double>::zeros({2}));
  EXPECT_EQ(tape.grad(x)->storage(), (std::vector<double>{2.0, 2.0}));
}

TEST(Tape, BackwardNeedsScalar) {
  Tape<float> tape;
  const auto x = tape.leaf(Tensor<float>({2}, 1.0f), true);
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, RejectsForeignVariables) {
  Tape<float> a, b;
  const auto x = a.leaf(Tensor<float>({2}, 1.0f));
  EXPECT_THROW(b.value(x), Error);
  EXPECT_THROW(add(x, b.leaf(Tensor<float>({2}, 1.0f))), Error);
}

TEST(Tape, SecondBackwardStartsFresh) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>({1}, 3.0), true);
  const auto y = sum(mul(x, x));
  tape.backward(y);
  tape.backward(y);
  EXPECT_DOUBLE_EQ((*tape.grad(x))[0], 6.0);
}

TEST(Gradcheck, AcceptsCorrectGradient) {
  Rng rng(3);
  const auto x0 = testing::random_tensor<double>(rng, {4, 3});
  const auto r = gradcheck([](const Var<double>& x) { return sum(mul(gelu(x), x)); }, x0);
  EXPECT_LT(r.max_rel_error, 1e-7);
  EXPECT_EQ(r.probes, 12u);
}

TEST(Gradcheck, DirectionModeAgrees) {
  Rng rng(4);
  GradcheckOptions opt;
  opt.mode = GradcheckMode::directions;
  opt.directions_per_input = 5;
  const auto r = gradcheck([](Tape<double>&, std::span<const Var<double>> v) { return sum(mul(softmax(v[0], 1), v[1])); },
                           {testing::random_tensor<double>(rng, {3, 4}), testing::random_tensor<double>(rng, {3, 4})}, opt);
  EXPECT_LT(r.max_rel_error, 1e-7);
  EXPECT_EQ(r.per_input.size(), 2u);
  EXPECT_EQ(r.probes, 10u);
}

TEST(Gradcheck, DetectsWrongBackwardRule) {
  // A hand-recorded square with a deliberately wrong derivative (3x instead of 2x).
  auto bad_square = [](const Var<double>& x) {
    Tensor<double> out = x.value();
    for (auto& v : out.data()) v *= v;
    return x.tape().record(std::move(out), {x}, [x](Tape<double>& tape, const Tensor<double>& g) {
      auto& d = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += 3 * x.value()[i] * g[i];
    });
  };
  Rng rng(5);
  const auto r = gradcheck([&](const Var<double>& x) { return sum(bad_square(x)); },
                           testing::random_tensor<double>(rng, {5}));
  EXPECT_NEAR(r.max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(relative_error(1e-12, 0.0), 1e-4, 1e-18);
}

TEST(Gradcheck, EveryPrimitivePasses) {
  for (const auto& c : gradcheck_ops(0)) {
    EXPECT_TRUE(c.passed()) << c.name << " rel error " << c.result.max_rel_error;
  }
}

TEST(Gradcheck, PrimitivesPassForOtherSeeds) {
  for (std::uint64_t seed : {1u, 2u}) {
    for (const auto& c : gradcheck_ops(seed)) {
      EXPECT_TRUE(c.passed()) << c.name << " seed " << seed << " rel error " << c.result.max_rel_error;
    }
  }
}

TEST(Gradcheck, CorruptedGeluBackwardIsCaught) {
  FaultGuard guard(1.01);
  bool caught = false;
  for (const auto& c : gradcheck_ops(0)) {
    if (c.name.rfind("gelu", 0) == 0) {
      EXPECT_FALSE(c.passed()) << c.name;
      caught = true;
    }
  }
  EXPECT_TRUE(caught);
}

TEST(Gradcheck, CoordinateSamplingLimitsProbes) {
  Rng rng(6);
  GradcheckOptions opt;
  opt.max_coords_per_input = 7;
  const auto r = gradcheck([](Tape<double>&, std::span<const Var<double>> v) { return sum(mul(v[0], v[0])); },
                           {testing::random_tensor<double>(rng, {10, 10})}, opt);
  EXPECT_EQ(r.probes, 7u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

}  // namespace
}  // namespace d2mlp
