// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "fp4sim/qlinear.hpp"
#include "oracles.hpp"

using namespace fp4sim;

namespace {
Matrix randn(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  RngStream rng(seed, "ql");
  Matrix m(r, c);
  for (float& v : m.data) v = static_cast<float>(rng.normal() * sd);
  return m;
}

struct McResult {
  double worst_z = 0.0;  // max |mean - target| / (sd / sqrt(n)), floored
  bool within = true;
};

// Monte-Carlo mean of linear_backward over `draws` seeds against the
// straight-through targets dY W-hat and dY^T X-hat.
McResult backward_mc(const Matrix& x, const Matrix& w, const Matrix& dy, const LayerQuantConfig& cfg, int draws,
                     double k_sigma) {
  auto fwd = linear_forward(x, w, cfg, {1, 0, 0});
  const Matrix tdx = oracle::matmul(dy, fwd.cache.w_hat);
  const Matrix tdw = oracle::matmul(oracle::transpose(dy), fwd.cache.x_hat);
  std::vector<double> sx(tdx.size()), sx2(tdx.size()), sw(tdw.size()), sw2(tdw.size());
  for (int t = 0; t < draws; ++t) {
    LinearCache cache = fwd.cache;
    cache.key.seed = 1000 + static_cast<std::uint64_t>(t);
    const auto g = linear_backward(dy, cache, cfg, 0);
    for (std::size_t i = 0; i < tdx.size(); ++i) {
      sx[i] += g.dx.data[i];
      sx2[i] += static_cast<double>(g.dx.data[i]) * g.dx.data[i];
    }
    for (std::size_t i = 0; i < tdw.size(); ++i) {
      sw[i] += g.dw.data[i];
      sw2[i] += static_cast<double>(g.dw.data[i]) * g.dw.data[i];
    }
  }
  McResult res;
  const auto check = [&](const std::vector<double>& s, const std::vector<double>& s2, const Matrix& target) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double mean = s[i] / draws;
      const double se = std::sqrt(std::max(0.0, s2[i] / draws - mean * mean) / draws);
      const double dev = std::fabs(mean - target.data[i]);
      const double floor = 1e-6 * (1.0 + std::fabs(target.data[i]));
      if (dev > k_sigma * se + floor) res.within = false;
      res.worst_z = std::max(res.worst_z, dev / (se + floor));
    }
  };
  check(sx, sx2, tdx);
  check(sw, sw2, tdw);
  return res;
}
// E2M1 values times 1.75 with a 10.5 in every 16-group: S_global = 2^-8 and
// S_block = 448 are exact, so every entry is a fixed point of the quantizer.
Matrix representable(std::size_t r, std::size_t c, std::uint64_t seed) {
  const auto vals = format_spec(Format::E2M1).values();
  RngStream rng(seed, "repr");
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i)
    m.data[i] = 1.75f * ((i % 16 == 3) ? 6.0f : static_cast<float>(vals[rng.uniform_index(vals.size())]));
  return m;
}
}  // namespace

TEST(LinearForward, BypassIsBitExact) {
  const Matrix x = randn(8, 48, 1), w = randn(24, 48, 2), dy = randn(8, 24, 3);
  const auto cfg = preset_fp32();
  const auto f = linear_forward(x, w, cfg, {0, 0, 5});
  EXPECT_EQ(f.y, matmul_nt(x, w));
  const auto g = linear_backward(dy, f.cache, cfg, 5);
  EXPECT_EQ(g.dx, matmul(dy, w));
  EXPECT_EQ(g.dw, matmul_tn(dy, x));
}

TEST(LinearForward, RepresentableOperandsAreExact) {
  const Matrix x = representable(8, 64, 1), w = representable(16, 64, 2);
  const auto f = linear_forward(x, w, preset_base(), {0, 0, 0});
  EXPECT_EQ(f.cache.x_hat, x);
  EXPECT_EQ(f.cache.w_hat, w);
  EXPECT_EQ(f.y, matmul_nt(x, w));
}

TEST(LinearForward, CacheHoldsConsumedOperands) {
  const Matrix x = randn(16, 64, 5), w = randn(32, 64, 6);
  for (auto cfg : {preset_base(), preset_nvidia_recipe()}) {
    const auto f = linear_forward(x, w, cfg, {0, 0, 0});
    EXPECT_EQ(f.y, matmul_nt(f.cache.x_hat, f.cache.w_hat));
    EXPECT_EQ(f.cache.x_hat, fake_quantize(x, {Orientation::RowGroups_1x16, cfg.outer}, RoundingMode::Deterministic));
  }
}

TEST(LinearForward, OutControlReducesPlantedOutlierError) {
  Matrix x = randn(32, 64, 7);
  for (std::size_t r = 0; r < x.rows; ++r) x(r, 9) *= 1000.0f;
  const Matrix w = representable(16, 64, 8);  // W-hat = W, so the error is all activation-side
  const Matrix ref = oracle::matmul(x, oracle::transpose(w));
  auto with = preset_full();
  with.outlier = select_outlier_channels({x}, 100.0 / 64, OutlierStyle::LargestNorm, nullptr,
                                         OutlierPrecision::Binary16);
  ASSERT_EQ(with.outlier->channels, std::vector<std::size_t>{9});
  const double err_with = max_abs_diff(linear_forward(x, w, with, {}).y, ref);
  const double err_without = max_abs_diff(linear_forward(x, w, preset_base(), {}).y, ref);
  EXPECT_LT(err_with, err_without);
}

TEST(LinearForward, OutControlRecoversFlushedNeighbours) {
  // Without the split, the outlier sets its groups' scales and the other
  // entries of those groups flush toward zero.
  Matrix x = randn(32, 64, 7);
  for (std::size_t r = 0; r < x.rows; ++r) x(r, 9) *= 1000.0f;
  auto with = preset_full();
  with.outlier->channels = {9};
  const Matrix a = linear_forward(x, Matrix(1, 64), with, {}).cache.x_hat;
  const Matrix b = linear_forward(x, Matrix(1, 64), preset_base(), {}).cache.x_hat;
  double err_a = 0.0, err_b = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      if (c == 9) continue;
      err_a += std::pow(a(r, c) - x(r, c), 2);
      err_b += std::pow(b(r, c) - x(r, c), 2);
    }
  EXPECT_LT(err_a, 0.1 * err_b);
}

TEST(LinearForward, OutlierColumnsUseOutlierPrecision) {
  const Matrix x = randn(8, 32, 9), w = randn(4, 32, 10);
  auto cfg = preset_full();
  cfg.outlier->channels = {3, 17};
  cfg.outlier->precision = OutlierPrecision::Binary32;
  const auto f = linear_forward(x, w, cfg, {});
  for (std::size_t r = 0; r < x.rows; ++r) {
    EXPECT_EQ(f.cache.x_hat(r, 3), x(r, 3));
    EXPECT_EQ(f.cache.x_hat(r, 17), x(r, 17));
  }
  cfg.outlier->precision = OutlierPrecision::Binary16;
  const auto h = linear_forward(x, w, cfg, {});
  for (std::size_t r = 0; r < x.rows; ++r) EXPECT_EQ(h.cache.x_hat(r, 3), round_binary16(x(r, 3)));
}

TEST(LinearForward, Errors) {
  EXPECT_THROW(linear_forward(Matrix(2, 3), Matrix(2, 4), preset_base(), {}), std::invalid_argument);
  auto cfg = preset_full();
  cfg.outlier->channels = {40};
  EXPECT_THROW(linear_forward(Matrix(2, 32), Matrix(2, 32), cfg, {}), std::out_of_range);
}

TEST(LinearBackward, StepMismatchThrows) {
  const auto f = linear_forward(randn(4, 16, 1), randn(4, 16, 2), preset_base(), {0, 0, 3});
  EXPECT_THROW(linear_backward(Matrix(4, 4), f.cache, preset_base(), 4), std::invalid_argument);
  EXPECT_THROW(linear_backward(Matrix(4, 5), f.cache, preset_base(), 3), std::invalid_argument);
}

TEST(LinearBackward, ZeroGradientIsExactlyZero) {
  for (auto cfg : {preset_base(), preset_nvidia_recipe(), preset_full()}) {
    if (cfg.outlier) cfg.outlier->channels = {1, 2};
    const auto f = linear_forward(randn(8, 32, 1), randn(16, 32, 2), cfg, {0, 0, 0});
    const auto g = linear_backward(Matrix(8, 16), f.cache, cfg, 0);
    for (float v : g.dx.data) EXPECT_EQ(v, 0.0f);
    for (float v : g.dw.data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(LinearBackward, DeterministicGivenKey) {
  const auto cfg = preset_base();
  const auto f = linear_forward(randn(8, 32, 1), randn(16, 32, 2), cfg, {3, 1, 7});
  const Matrix dy = randn(8, 16, 3);
  const auto a = linear_backward(dy, f.cache, cfg, 7);
  const auto b = linear_backward(dy, f.cache, cfg, 7);
  EXPECT_EQ(a.dx, b.dx);
  EXPECT_EQ(a.dw, b.dw);
}

TEST(LinearBackward, OutlierColumnsOfWeightGradientAreExact) {
  const Matrix x = randn(8, 32, 11), w = randn(16, 32, 12), dy = randn(8, 16, 13);
  auto cfg = preset_full();
  cfg.outlier->channels = {0, 31};
  const auto f = linear_forward(x, w, cfg, {});
  const auto g = linear_backward(dy, f.cache, cfg, 0);
  const Matrix ref = oracle::matmul(oracle::transpose(dy), f.cache.x_hat);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(g.dw(i, 0), ref(i, 0));
    EXPECT_EQ(g.dw(i, 31), ref(i, 31));
  }
}

TEST(LinearBackward, UnbiasedWithRht) {
  const Matrix x = randn(8, 32, 21), w = randn(16, 32, 22), dy = randn(8, 16, 23);
  const auto r = backward_mc(x, w, dy, preset_base(), 100000, 4.0);
  EXPECT_TRUE(r.within) << "worst z " << r.worst_z;
}

TEST(LinearBackward, UnbiasedWithoutRhtAndWithOutControl) {
  Matrix x = randn(8, 32, 31);
  for (std::size_t r = 0; r < 8; ++r) x(r, 5) *= 50.0f;
  const Matrix w = randn(16, 32, 32), dy = randn(8, 16, 33);
  auto cfg = preset_full();
  cfg.rht_dx = cfg.rht_dw = false;
  cfg.outlier->channels = {5};
  const auto r = backward_mc(x, w, dy, cfg, 20000, 4.0);
  EXPECT_TRUE(r.within) << "worst z " << r.worst_z;
}

TEST(LinearBackward, DeterministicRecipeIsBiasedOnBoundaryInput) {
  // Latent values parked at 0.3 of a bin: RTN always lands on the low code.
  Matrix x(8, 32, 0.0f), w(16, 32, 0.0f);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 32; ++c) x(r, c) = (c % 16 == 0) ? 6.0f : 0.15f;
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 32; ++c) w(r, c) = (c % 16 == 0) ? 6.0f : 1.0f;
  Matrix dy(8, 16);
  for (std::size_t i = 0; i < dy.size(); ++i) dy.data[i] = (i % 16 == 0) ? 6.0f : 0.3f;
  const auto biased = backward_mc(x, w, dy, preset_nvidia_recipe(), 2000, 5.0);
  EXPECT_FALSE(biased.within);
  const auto clean = backward_mc(x, w, dy, preset_base(), 20000, 5.0);
  EXPECT_TRUE(clean.within) << "worst z " << clean.worst_z;
}

TEST(SelectOutliers, Extremes) {
  const Matrix a = randn(16, 40, 1);
  EXPECT_TRUE(select_outlier_channels({a}, 0.0, OutlierStyle::LargestNorm).channels.empty());
  EXPECT_EQ(select_outlier_channels({a}, 100.0, OutlierStyle::LargestNorm).channels.size(), 40u);
  EXPECT_TRUE(select_outlier_channels({a}, 50.0, OutlierStyle::None).channels.empty());
  EXPECT_THROW(select_outlier_channels({}, 10.0, OutlierStyle::LargestNorm), std::invalid_argument);
}

TEST(SelectOutliers, FindsPlantedChannels) {
  std::vector<Matrix> batches{randn(32, 64, 2), randn(32, 64, 3)};
  for (auto& b : batches)
    for (std::size_t r = 0; r < b.rows; ++r)
      for (std::size_t c : {4u, 33u, 60u}) b(r, c) *= 100.0f;
  const auto cfg = select_outlier_channels(batches, 3.0 / 64 * 100, OutlierStyle::LargestNorm);
  EXPECT_EQ(cfg.channels, (std::vector<std::size_t>{4, 33, 60}));
}

TEST(SelectOutliers, RandomIsSeededAndSorted) {
  const Matrix a = randn(4, 100, 1);
  RngStream r1(5, "outliers"), r2(5, "outliers");
  const auto c1 = select_outlier_channels({a}, 10.0, OutlierStyle::Random, &r1);
  EXPECT_EQ(c1.channels.size(), 10u);
  EXPECT_TRUE(std::is_sorted(c1.channels.begin(), c1.channels.end()));
  EXPECT_EQ(c1.channels, select_outlier_channels({a}, 10.0, OutlierStyle::Random, &r2).channels);
}

TEST(PrecisionMode, SiteFormats) {
  const auto base = preset_base();
  const auto same = set_precision_mode(base, PrecisionMode::FP4xFP4);
  EXPECT_EQ(same.format, base.format);
  EXPECT_EQ(same.enabled, base.enabled);
  const auto mixed = set_precision_mode(base, PrecisionMode::FP6xFP4);
  EXPECT_EQ(mixed.fmt(Site::FwdX), Format::FP6_E3M2);
  EXPECT_EQ(mixed.fmt(Site::FwdW), Format::E2M1);
  EXPECT_EQ(mixed.fmt(Site::InputDy), Format::FP6_E3M2);
  EXPECT_EQ(mixed.fmt(Site::InputW), Format::E2M1);
  EXPECT_EQ(mixed.fmt(Site::WeightDy), Format::E2M1);
  EXPECT_EQ(mixed.fmt(Site::WeightX), Format::FP6_E3M2);
  for (Site s : kAllSites) EXPECT_EQ(set_precision_mode(base, PrecisionMode::FP6xFP6).fmt(s), Format::FP6_E3M2);
}

TEST(PrecisionMode, Fp6ForwardIsCloser) {
  const Matrix x = randn(32, 64, 1), w = randn(32, 64, 2);
  const Matrix ref = oracle::matmul(x, oracle::transpose(w));
  const auto f4 = linear_forward(x, w, preset_base(), {});
  const auto f6 = linear_forward(x, w, set_precision_mode(preset_base(), PrecisionMode::FP6xFP6), {});
  EXPECT_LE(mse(f6.cache.x_hat, x), mse(f4.cache.x_hat, x));
  EXPECT_LE(mse(f6.y, ref), mse(f4.y, ref));
}

TEST(ForwardRhtAblation, ProductStaysClose) {
  const Matrix x = randn(16, 64, 1), w = randn(8, 64, 2);
  auto cfg = preset_base();
  cfg.rht_fwd = true;
  const auto f = linear_forward(x, w, cfg, {1, 2, 3});
  const Matrix ref = oracle::matmul(x, oracle::transpose(w));
  EXPECT_LT(max_abs_diff(f.y, ref), 0.5 * max_abs(ref.data));
}
