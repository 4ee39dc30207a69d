#include <gtest/gtest.h>

#include <cmath>

#include "fedprior/errors.hpp"
#include "fedprior/imaging.hpp"
#include "fedprior/numerics/rng.hpp"
#include "oracles.hpp"

namespace fedprior::imaging {
namespace {

using testing::random_complex;

double energy(const Tensor& t) {
  double e = 0.0;
  for (double v : t.values()) e += v * v;
  return e;
}

double inner(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor random_kspace(std::size_t nc, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({nc, h, w, 2});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

TEST(Dft2, MatchesBruteForceSum) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {4, 6}}) {
    const Tensor x = random_complex(h, w, 3);
    for (bool inv : {false, true}) {
      const Tensor fast = dft2(x, inv);
      const Tensor slow = testing::brute_force_dft2(x, inv);
      for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12);
    }
  }
}

TEST(Dft2, ConstantImageConcentratesAtCentre) {
  Tensor x({8, 8, 2});
  for (std::size_t p = 0; p < 64; ++p) x[2 * p] = 0.7;
  const Tensor k = dft2(x);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t xx = 0; xx < 8; ++xx) {
      const double expect = (y == 4 && xx == 4) ? 0.7 * 8.0 : 0.0;
      EXPECT_NEAR(k.at(y, xx, 0), expect, 1e-12);
      EXPECT_NEAR(k.at(y, xx, 1), 0.0, 1e-12);
    }
  }
}

TEST(Dft2, CentredDeltaHasFlatSpectrum) {
  Tensor x({8, 4, 2});
  x.at(4, 2, 0) = 1.0;
  const Tensor k = dft2(x);
  for (std::size_t p = 0; p < 32; ++p) EXPECT_NEAR(std::hypot(k[2 * p], k[2 * p + 1]), 1.0 / std::sqrt(32.0), 1e-14);
}

TEST(Dft2, UnitaryRoundTripAndEnergy) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = random_complex(32, 32, s);
    const Tensor k = dft2(x);
    EXPECT_NEAR(energy(k), energy(x), 1e-10 * energy(x));
    const Tensor back = dft2(k, true);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(back[i], x[i], 1e-10);
  }
}

TEST(Mask, SmallExampleCountAndCalibrationBlock) {
  const Mask m = gen_vd_mask(8, 8, 4.0, 1, 42);
  EXPECT_EQ(m.count(), 16u);
  for (std::size_t y = 3; y < 5; ++y) {
    for (std::size_t x = 3; x < 5; ++x) EXPECT_EQ(m.bits.at(y, x), 1.0);
  }
}

TEST(Mask, NoAccelerationSamplesEverything) {
  const Mask m = gen_vd_mask(16, 16, 1.0, 1, 9);
  EXPECT_EQ(m.count(), 256u);
}

TEST(Mask, ExactCardinalityAcrossAccelerationsAndSeeds) {
  for (double r : {1.0, 4.0, 8.0}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Mask m = gen_vd_mask(32, 32, r, default_acs_half_width(32), seed);
      EXPECT_EQ(m.count(), static_cast<std::size_t>(std::llround(1024.0 / r)));
      for (std::size_t y = 14; y < 18; ++y) {
        for (std::size_t x = 14; x < 18; ++x) EXPECT_EQ(m.bits.at(y, x), 1.0);
      }
    }
  }
}

TEST(Mask, DeterministicPerSeedAndVariesAcrossSeeds) {
  EXPECT_TRUE(bit_equal(gen_vd_mask(32, 32, 4, 2, 5).bits, gen_vd_mask(32, 32, 4, 2, 5).bits));
  EXPECT_FALSE(bit_equal(gen_vd_mask(32, 32, 4, 2, 5).bits, gen_vd_mask(32, 32, 4, 2, 6).bits));
}

TEST(Mask, DensityFavoursCentre) {
  // Averaged over seeds, samples near the centre are more frequent than at the edge.
  double centre = 0, edge = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Mask m = gen_vd_mask(32, 32, 8, 2, seed);
    centre += m.bits.at(16, 20);
    edge += m.bits.at(16, 31);
  }
  EXPECT_GT(centre, edge);
}

TEST(Mask, BudgetSmallerThanCalibrationBlockIsConfigError) {
  EXPECT_THROW(gen_vd_mask(8, 8, 16.0, 2, 0), ConfigError);
}

TEST(Coils, SingleCoilHasUnitMagnitude) {
  const CoilSet c = gen_coils(16, 16, 1, 3);
  for (std::size_t p = 0; p < 256; ++p) EXPECT_NEAR(std::hypot(c.sens[2 * p], c.sens[2 * p + 1]), 1.0, 1e-12);
}

TEST(Coils, SumOfSquaresIsOneEverywhere) {
  for (std::size_t nc : {2, 4, 8}) {
    const CoilSet c = gen_coils(32, 32, nc, nc);
    for (std::size_t p = 0; p < 1024; ++p) {
      double ss = 0;
      for (std::size_t k = 0; k < nc; ++k) {
        ss += c.sens[(k * 1024 + p) * 2] * c.sens[(k * 1024 + p) * 2] +
              c.sens[(k * 1024 + p) * 2 + 1] * c.sens[(k * 1024 + p) * 2 + 1];
      }
      ASSERT_NEAR(ss, 1.0, 1e-10);
    }
  }
  EXPECT_TRUE(bit_equal(gen_coils(16, 16, 4, 1).sens, gen_coils(16, 16, 4, 1).sens));
}

TEST(ForwardOp, FullMaskUnitCoilIsDft) {
  const ImagingOperator op(gen_vd_mask(16, 16, 1.0, 1, 0), CoilSet::unit(16, 16));
  const Tensor x = random_complex(16, 16, 4);
  const Tensor y = forward_op(x, op);
  const Tensor k = dft2(x);
  for (std::size_t i = 0; i < k.size(); ++i) EXPECT_EQ(y[i], k[i]);
  const Tensor back = adjoint_op(y, op);
  const Tensor inv = dft2(y.reshaped({16, 16, 2}), true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(back[i], inv[i]);
}

TEST(ForwardOp, ZeroImageGivesZeroKspace) {
  const ImagingOperator op(gen_vd_mask(16, 16, 4.0, 1, 0), gen_coils(16, 16, 4, 0));
  const Tensor y = forward_op(Tensor({16, 16, 2}), op);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardOp, UnsampledEntriesAreExactlyZero) {
  const ImagingOperator op(gen_vd_mask(16, 16, 4.0, 1, 7), gen_coils(16, 16, 3, 0));
  const Tensor y = forward_op(random_complex(16, 16, 1), op);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 256; ++p) {
      if (op.mask().bits[p] == 0.0) {
        EXPECT_EQ(y[(c * 256 + p) * 2], 0.0);
        EXPECT_EQ(y[(c * 256 + p) * 2 + 1], 0.0);
      }
    }
  }
}

TEST(ForwardOp, ShapeMismatchThrows) {
  const ImagingOperator op(gen_vd_mask(16, 16, 4.0, 1, 0), CoilSet::unit(16, 16));
  EXPECT_THROW(forward_op(Tensor({8, 8, 2}), op), ShapeError);
  EXPECT_THROW(adjoint_op(Tensor({2, 16, 16, 2}), op), ShapeError);
  EXPECT_THROW(ImagingOperator(gen_vd_mask(16, 16, 4.0, 1, 0), CoilSet::unit(8, 8)), ShapeError);
}

TEST(AdjointOp, DotProductTestOnRandomOperators) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const std::size_t nc = 1 + trial % 4;
    const ImagingOperator op(gen_vd_mask(16, 16, 1.0 + static_cast<double>(trial % 8), 1, trial),
                             gen_coils(16, 16, nc, trial));
    const Tensor x = random_complex(16, 16, 2 * trial);
    const Tensor y = random_kspace(nc, 16, 16, 2 * trial + 1);
    const Tensor ax = forward_op(x, op);
    const double lhs = inner(ax, y);
    const double rhs = inner(x, adjoint_op(y, op));
    ASSERT_LT(std::abs(lhs - rhs) / (std::sqrt(energy(ax)) * std::sqrt(energy(y))), 1e-10);
  }
}

TEST(AdjointOp, RecoversImageWithFullMask) {
  const ImagingOperator op(gen_vd_mask(16, 16, 1.0, 1, 0), gen_coils(16, 16, 4, 2));
  const Tensor x = random_complex(16, 16, 8);
  const Tensor back = adjoint_op(forward_op(x, op), op);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
}

TEST(Metrics, PsnrClosedForms) {
  const Tensor zero({8, 8}, 0.0);
  EXPECT_TRUE(std::isinf(psnr(zero, zero)));
  EXPECT_NEAR(psnr(zero, Tensor({8, 8}, 0.1)), 20.0, 1e-9);
  EXPECT_NEAR(psnr(zero, Tensor({8, 8}, 0.5)), 6.0206, 1e-4);
  EXPECT_NEAR(psnr(zero, Tensor({8, 8}, 0.5)), 10.0 * std::log10(4.0), 1e-9);
}

TEST(Metrics, PsnrDecreasesWithNoiseScale) {
  Rng rng(1);
  Tensor x({16, 16}), noise({16, 16});
  for (auto& v : x.values()) v = rng.uniform();
  for (auto& v : noise.values()) v = rng.normal();
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3}) {
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * noise[i];
    const double p = psnr(x, y);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Metrics, SsimIdentityAndAnticorrelation) {
  Tensor x({16, 16});
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t xx = 0; xx < 16; ++xx) x.at(y, xx) = ((y / 2 + xx / 2) % 2) ? 1.0 : 0.0;
  }
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  Tensor inv = x;
  for (auto& v : inv.values()) v = 1.0 - v;
  EXPECT_LT(ssim(x, inv), 0.0);
}

TEST(Metrics, SsimConstantImagesClosedForm) {
  const double c1 = 1e-4, c2 = 9e-4;
  for (auto [a, b] : {std::pair{0.2, 0.6}, {0.0, 1.0}, {0.5, 0.5}, {0.9, 0.3}}) {
    const double expect = ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2);
    EXPECT_NEAR(ssim(Tensor({9, 8}, a), Tensor({9, 8}, b)), expect, 1e-9);
  }
}

TEST(Metrics, SsimRejectsTinyImages) { EXPECT_THROW(ssim(Tensor({6, 10}), Tensor({6, 10})), ConfigError); }

TEST(DcResidual, ZeroForConsistentData) {
  const ImagingOperator op(gen_vd_mask(16, 16, 4.0, 1, 3), CoilSet::unit(16, 16));
  const Tensor x = random_complex(16, 16, 5);
  EXPECT_LT(dc_residual(x, forward_op(x, op), op), 1e-14);
}

}  // namespace
}  // namespace fedprior::imaging
