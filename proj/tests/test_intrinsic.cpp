#include <gtest/gtest.h>

#include <cmath>

#include "leco/intrinsic.hpp"
#include "leco/rng.hpp"

using namespace leco;
namespace ad = leco::ad;

TEST(Combine, EndpointsAndArithmetic) {
  EXPECT_DOUBLE_EQ(combine(0.7, -0.3, 0.0), 0.7);
  EXPECT_DOUBLE_EQ(combine(0.7, -0.3, 1.0), -0.3);
  EXPECT_DOUBLE_EQ(combine(1.0, 0.0, 0.5), 0.5);
  // affine in each argument: equal inputs are a fixed point for any weight
  for (double lam : {0.0, 0.25, 0.5, 0.9, 1.0})
    EXPECT_DOUBLE_EQ(combine(0.42, 0.42, lam), 0.42);
}

TEST(Combine, RejectsWeightOutsideUnitInterval) {
  EXPECT_THROW(combine(0.5, 0.0, -0.01), ConfigError);
  EXPECT_THROW(combine(0.5, 0.0, 1.01), ConfigError);
  EXPECT_THROW(combine(0.5, 0.0, std::nan("")), ConfigError);
}

TEST(Combine, MagnitudeBoundedByComponents) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double r_ep = rng.uniform(0.0, 1.0);
    const double r_ta = rng.uniform(-1.0, 1.0);
    const double lam = rng.uniform(0.0, 1.0);
    const double r = combine(r_ep, r_ta, lam);
    EXPECT_LE(std::abs(r), std::max(r_ep, std::abs(r_ta)) + 1e-15);
  }
}

TEST(TotalReward, ScalesIntrinsicByAlpha) {
  EXPECT_DOUBLE_EQ(total_reward(0.0, 1.0, 0.01), 0.01);
  EXPECT_DOUBLE_EQ(total_reward(0.37, 0.0, 0.01), 0.37);
  EXPECT_DOUBLE_EQ(total_reward(1.0, -0.5, 0.1), 0.95);
}

TEST(Modulator, ZeroOutputLayerGivesZeroModulation) {
  Rng rng(5);
  Modulator m(8, 7, rng);
  m.zero_output_layer();
  for (int i = 0; i < 100; ++i) {
    Tensor z = Tensor::rand_uniform({8}, -2, 2, rng);
    const double r = m.modulate(z, rng.uniform_int(7), rng.uniform_int(7));
    EXPECT_EQ(r, 0.0);
  }
}

TEST(Modulator, NullPreviousActionGivesExactZero) {
  Rng rng(7);
  Modulator m(8, 7, rng);
  for (int i = 0; i < 100; ++i) {
    Tensor z = Tensor::rand_uniform({8}, -2, 2, rng);
    EXPECT_EQ(m.modulate(z, rng.uniform_int(7), std::nullopt), 0.0);
  }
}

TEST(Modulator, OutputStrictlyInsideUnitInterval) {
  Rng rng(11);
  for (int pdraw = 0; pdraw < 10; ++pdraw) {
    Modulator m(8, 7, rng, false, 32);
    for (int i = 0; i < 1000; ++i) {
      Tensor z = Tensor::rand_uniform({8}, -5, 5, rng);
      const double r = m.modulate(z, rng.uniform_int(7), rng.uniform_int(7));
      EXPECT_GT(r, -1.0);
      EXPECT_LT(r, 1.0);
    }
  }
}

TEST(Modulator, BatchForwardMatchesSingleStepPath) {
  Rng rng(13);
  Modulator m(6, 7, rng, false, 16);
  Tensor z = Tensor::rand_uniform({3, 6}, -1, 1, rng);
  std::vector<int64_t> a{1, 4, 6};
  std::vector<int64_t> prev{-1, 2, 0};
  ad::Var out = m.forward(ad::Var::constant(z), a, prev);
  ASSERT_EQ(out.shape(), (Shape{3, 1}));
  for (int64_t i = 0; i < 3; ++i) {
    Tensor zi = Tensor::from(std::vector<double>(z.data() + i * 6, z.data() + (i + 1) * 6), {6});
    std::optional<int64_t> p = prev[static_cast<size_t>(i)] >= 0
                                   ? std::optional<int64_t>(prev[static_cast<size_t>(i)])
                                   : std::nullopt;
    EXPECT_DOUBLE_EQ(out.val()[i], m.modulate(zi, a[static_cast<size_t>(i)], p));
  }
  EXPECT_EQ(out.val()[0], 0.0);  // null previous action row
}

TEST(ModulatorNaive, ZeroOutputLayerIgnoresEpisodicInput) {
  Rng rng(17);
  Modulator m(8, 7, rng, /*naive=*/true);
  m.zero_output_layer();
  for (double rep : {1.0, 0.5, 0.25, 0.1}) {
    Tensor z = Tensor::rand_uniform({8}, -2, 2, rng);
    EXPECT_EQ(m.modulate(z, 3, 2, rep), 0.0);
  }
}

TEST(ModulatorNaive, OutputBoundedAndSensitiveToEpisodicInput) {
  Rng rng(19);
  Modulator m(8, 7, rng, true, 32);
  Tensor z = Tensor::rand_uniform({8}, -1, 1, rng);
  double lo = 1e9, hi = -1e9;
  for (double rep = 0.05; rep <= 1.0; rep += 0.05) {
    const double r = m.modulate(z, 3, 2, rep);
    EXPECT_GT(r, -1.0);
    EXPECT_LT(r, 1.0);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  EXPECT_GT(hi - lo, 0.0);
}

TEST(ModulatorNaive, GradientWrtEpisodicInputMatchesFiniteDifferences) {
  Rng rng(23);
  Modulator m(5, 7, rng, true, 24);
  Tensor z = Tensor::rand_uniform({2, 5}, -1, 1, rng);
  std::vector<int64_t> a{2, 5};
  std::vector<int64_t> prev{1, 3};
  Tensor rep0 = Tensor::from({0.5, 0.25}, {2, 1});

  ad::Var rep = ad::Var::leaf(rep0);
  ad::Var out = m.forward(ad::Var::constant(z), a, prev, rep);
  Tensor g = ad::grad(ad::sum_all(out), {rep})[0].val();

  const double h = 1e-6;
  for (int64_t i = 0; i < 2; ++i) {
    Tensor up = rep0.clone(), dn = rep0.clone();
    up[i] += h;
    dn[i] -= h;
    ad::NoGradGuard ng;
    const double fu =
        ad::sum_all(m.forward(ad::Var::constant(z), a, prev, ad::Var::constant(up))).item();
    const double fd =
        ad::sum_all(m.forward(ad::Var::constant(z), a, prev, ad::Var::constant(dn))).item();
    const double numeric = (fu - fd) / (2 * h);
    EXPECT_LT(std::abs(g[i] - numeric) / std::max(std::abs(numeric), 1e-12), 1e-4);
  }
}

TEST(Modulator, MismatchedInputWidthRejected) {
  Rng rng(29);
  Modulator m(8, 7, rng);
  Tensor z = Tensor::rand_uniform({1, 5}, -1, 1, rng);
  EXPECT_THROW(m.forward(ad::Var::constant(z), {0}, {0}), ConfigError);
}
