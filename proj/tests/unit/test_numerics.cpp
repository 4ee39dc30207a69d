#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/adamw.hpp"
#include "fedprior/numerics/autodiff.hpp"
#include "fedprior/numerics/rng.hpp"
#include "gradcheck.hpp"

namespace fedprior {
namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  ad::Tape tape;
  const auto out = ad::matmul(tape.constant(mat(2, 2, {1, 0, 0, 1})), tape.constant(mat(2, 2, {1, 2, 3, 4})));
  EXPECT_EQ(out.value(), mat(2, 2, {1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  ad::Tape tape;
  const auto out = ad::matmul(tape.constant(mat(1, 2, {1, 2})), tape.constant(mat(2, 1, {3, 4})));
  EXPECT_EQ(out.value(), mat(1, 1, {11}));
}

TEST(Matmul, InnerDimMismatchThrows) {
  ad::Tape tape;
  EXPECT_THROW(ad::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor a({3, 4}), b({4, 2});
  for (auto& v : a.values()) v = rng.normal();
  for (auto& v : b.values()) v = rng.normal();
  ad::Tape tape;
  const auto av = tape.leaf("a", a);
  const auto grads = tape.backward(ad::sum(ad::matmul(av, tape.constant(b))));
  auto f = [&](const Tensor& x) {
    ad::Tape t;
    return ad::sum(ad::matmul(t.constant(x), t.constant(b))).value().item();
  };
  const double h = 1e-5;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Tensor p = a, m = a;
    p[i] += h;
    m[i] -= h;
    EXPECT_NEAR(grads.at("a")[i], (f(p) - f(m)) / (2 * h), 1e-9);
  }
  // ones * B^T: row i of dA is the row sums of B.
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(grads.at("a").at(r, c), b.at(c, 0) + b.at(c, 1), 1e-12);
  }
}

TEST(Softmax, UniformInput) {
  ad::Tape tape;
  const auto p = ad::softmax_rows(tape.constant(mat(1, 3, {0, 0, 0})));
  for (double v : p.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  ad::Tape tape;
  const auto p = ad::softmax_rows(tape.constant(mat(1, 2, {1000, 0})));
  EXPECT_TRUE(p.value().all_finite());
  EXPECT_DOUBLE_EQ(p.value()[0], 1.0);
  EXPECT_LT(p.value()[1], 1e-300);
}

TEST(Softmax, LogOfIntegersGivesProportions) {
  ad::Tape tape;
  const auto p = ad::softmax_rows(tape.constant(mat(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)})));
  EXPECT_NEAR(p.value()[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(p.value()[1], 2.0 / 6, 1e-15);
  EXPECT_NEAR(p.value()[2], 3.0 / 6, 1e-15);
}

TEST(Softmax, RandomRowsSumToOne) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x({4, 9});
    for (auto& v : x.values()) v = 30.0 * rng.normal();
    ad::Tape tape;
    const auto p = ad::softmax_rows(tape.constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GE(p.value().at(r, c), 0.0);
        EXPECT_LE(p.value().at(r, c), 1.0);
        s += p.value().at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  ad::Tape tape;
  const std::vector<std::uint8_t> mask = {1, 0, 1};
  const auto p = ad::softmax_rows(tape.constant(mat(1, 3, {0.2, 50.0, -0.1})), mask);
  EXPECT_EQ(p.value()[1], 0.0);
  EXPECT_NEAR(p.value()[0] + p.value()[2], 1.0, 1e-15);
  EXPECT_THROW(ad::softmax_rows(tape.constant(mat(1, 3, {0, 0, 0})), std::vector<std::uint8_t>{0, 0, 0}),
               ContractError);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  ad::Tape tape;
  const std::vector<std::uint32_t> tgt = {17, 4095};
  const auto ce = ad::cross_entropy(tape.constant(Tensor({2, 4096}, 0.0)), tgt);
  EXPECT_NEAR(ce.value().item(), std::log(4096.0), 1e-12);
  EXPECT_NEAR(ce.value().item(), 8.3178, 1e-4);
}

TEST(CrossEntropy, TwoClassZeroLogits) {
  ad::Tape tape;
  const std::vector<std::uint32_t> tgt = {0};
  EXPECT_NEAR(ad::cross_entropy(tape.constant(mat(1, 2, {0, 0})), tgt).value().item(), std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, DominantCorrectLogitApproachesZero) {
  ad::Tape tape;
  const std::vector<std::uint32_t> tgt = {1};
  const double ce = ad::cross_entropy(tape.constant(mat(1, 3, {0, 1e6, 0})), tgt).value().item();
  EXPECT_GE(ce, 0.0);
  EXPECT_LT(ce, 1e-12);
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  ad::Tape tape;
  const std::vector<std::uint32_t> tgt = {3};
  EXPECT_THROW(ad::cross_entropy(tape.constant(mat(1, 3, {0, 0, 0})), tgt), IndexError);
}

TEST(CrossEntropy, NonNegativeOnRandomInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({3, 7});
    for (auto& v : x.values()) v = 10.0 * rng.normal();
    std::vector<std::uint32_t> tgt = {static_cast<std::uint32_t>(rng.below(7)), static_cast<std::uint32_t>(rng.below(7)),
                                      static_cast<std::uint32_t>(rng.below(7))};
    ad::Tape tape;
    EXPECT_GE(ad::cross_entropy(tape.constant(x), tgt).value().item(), 0.0);
  }
}

TEST(Backward, SquareAtThree) {
  ad::Tape tape;
  const auto x = tape.leaf("x", Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(tape.backward(ad::mul(x, x)).at("x").item(), 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  ad::Tape tape;
  const auto x = tape.leaf("x", mat(1, 4, {0.3, -1.2, 2.0, 0.1}));
  const auto g = tape.backward(ad::sum(ad::softmax_rows(x))).at("x");
  for (double v : g.values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, UnreachedLeafGetsZeroGradient) {
  ad::Tape tape;
  const auto x = tape.leaf("x", Tensor::scalar(2.0));
  tape.leaf("unused", Tensor({2, 2}, 5.0));
  const auto g = tape.backward(ad::mul(x, x));
  EXPECT_EQ(g.at("unused"), Tensor({2, 2}, 0.0));
  EXPECT_EQ(g.size(), 2u);
}

TEST(Backward, RejectsNonScalarAndSecondUse) {
  ad::Tape tape;
  const auto x = tape.leaf("x", Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ContractError);
  tape.backward(ad::sum(x));
  EXPECT_THROW(tape.backward(ad::sum(x)), ContractError);
}

TEST(Backward, StraightThroughPassesGradientUnchanged) {
  ad::Tape tape;
  const auto z = tape.leaf("z", mat(1, 3, {0.1, 0.2, 0.3}));
  const auto q = ad::straight_through(z, mat(1, 3, {1, 1, 0}));
  EXPECT_EQ(q.value(), mat(1, 3, {1, 1, 0}));
  const auto w = tape.constant(mat(1, 3, {2, -1, 4}));
  const auto g = tape.backward(ad::sum(ad::mul(q, w)));
  EXPECT_EQ(g.at("z"), mat(1, 3, {2, -1, 4}));
}

class OpGradient : public ::testing::TestWithParam<testing::OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferencesAtRandomPoints) {
  for (std::uint64_t point = 0; point < 50; ++point) {
    const auto r = testing::gradcheck(GetParam(), 1000 + point);
    ASSERT_LT(r.max_rel_error, 1e-6) << GetParam().name << " at point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(testing::registered_op_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(AdamW, ZeroGradientZeroDecayLeavesParamsUnchanged) {
  ParamSet p;
  p.add("w", mat(1, 2, {0.5, -3.0}));
  AdamWState s;
  AdamWHyper h;
  h.weight_decay = 0.0;
  const ParamSet before = p;
  adamw_step(p, p.zeros_like(), s, h);
  EXPECT_TRUE(bit_equal(p, before));
}

TEST(AdamW, Defaults) {
  const AdamWHyper h;
  EXPECT_EQ(h.beta1, 0.9);
  EXPECT_EQ(h.beta2, 0.95);
  EXPECT_EQ(h.weight_decay, 0.05);
  EXPECT_EQ(h.lr, 1e-4);
}

TEST(AdamW, HandEvaluatedStep) {
  ParamSet p, g;
  p.add("x", Tensor::scalar(1.0));
  g.add("x", Tensor::scalar(1.0));
  AdamWState s;
  adamw_step(p, g, s, AdamWHyper{0.1, 0.0, 0.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(p.at("x").item(), 0.9);
  EXPECT_EQ(s.step, 1u);
}

TEST(AdamW, DeterministicAndShapeChecked) {
  Rng rng(3);
  ParamSet p, g;
  Tensor a({4, 4}), b({4, 4});
  for (auto& v : a.values()) v = rng.normal();
  for (auto& v : b.values()) v = rng.normal();
  p.add("a", a);
  g.add("a", b);
  ParamSet p1 = p, p2 = p;
  AdamWState s1, s2;
  for (int i = 0; i < 5; ++i) {
    adamw_step(p1, g, s1, AdamWHyper{});
    adamw_step(p2, g, s2, AdamWHyper{});
  }
  EXPECT_TRUE(bit_equal(p1, p2));
  ParamSet wrong;
  wrong.add("a", Tensor({4, 3}));
  EXPECT_THROW(adamw_step(p1, wrong, s1, AdamWHyper{}), ShapeError);
}

TEST(ParamSetTest, FlattenRoundTripAndCompatibility) {
  ParamSet p;
  p.add("z", mat(2, 2, {1, 2, 3, 4}));
  p.add("a", Tensor::scalar(-7.5));
  EXPECT_EQ(p.paths(), (std::vector<std::string>{"a", "z"}));
  const auto flat = p.flatten();
  EXPECT_EQ(flat, (std::vector<double>{-7.5, 1, 2, 3, 4}));
  EXPECT_TRUE(bit_equal(p.unflatten(flat), p));
  EXPECT_TRUE(p.shape_compatible(p.zeros_like()));
  ParamSet q;
  q.add("a", Tensor::scalar(0));
  EXPECT_FALSE(p.shape_compatible(q));
  EXPECT_THROW(p.add("a", Tensor::scalar(1)), ContractError);
}

}  // namespace
}  // namespace fedprior
