// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Fully quantized linear layer Y = X W^T with six quantizer sites:
//
//   forward   Y  = Q1(X) Q2(W)^T                         (RTN, grouped along D)
//   input     dX = Q3(dY S H) Q4(H^T S W-hat)            (contract over C)
//   weight    dW = Q5(dY^T S H) Q6(H^T S X-hat)          (contract over N)
//
// Every operand is held with its contraction axis along columns, so all
// quantizer groups run along rows and each product is a matmul_nt.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fp4sim/blockquant.hpp"
#include "fp4sim/fpcodec.hpp"
#include "fp4sim/hadamard.hpp"
#include "fp4sim/matrix.hpp"
#include "fp4sim/rng.hpp"

namespace fp4sim {

enum class Site : std::uint8_t { FwdX = 0, FwdW, InputDy, InputW, WeightDy, WeightX };
inline constexpr std::size_t kSiteCount = 6;
inline constexpr std::array<Site, kSiteCount> kAllSites{Site::FwdX,    Site::FwdW,     Site::InputDy,
                                                        Site::InputW,  Site::WeightDy, Site::WeightX};

inline std::string_view to_string(Site s) {
  static constexpr std::array<std::string_view, kSiteCount> names{"fwd.x", "fwd.w", "dx.dy",
                                                                  "dx.w",  "dw.dy", "dw.x"};
  return names[static_cast<std::size_t>(s)];
}

inline Site parse_site(std::string_view s) {
  for (Site site : kAllSites)
    if (to_string(site) == s) return site;
  throw std::invalid_argument("unknown quantizer site '" + std::string(s) + "'");
}

enum class OutlierPrecision : std::uint8_t { E4M3 = 0, Binary16 = 1, Binary32 = 2 };
enum class OutlierStyle : std::uint8_t { LargestNorm = 0, Random = 1, None = 2 };

inline std::string_view to_string(OutlierPrecision p) {
  switch (p) {
    case OutlierPrecision::E4M3: return "e4m3";
    case OutlierPrecision::Binary16: return "binary16";
    case OutlierPrecision::Binary32: return "binary32";
  }
  return "?";
}

inline OutlierPrecision parse_outlier_precision(std::string_view s) {
  for (auto p : {OutlierPrecision::E4M3, OutlierPrecision::Binary16, OutlierPrecision::Binary32})
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown outlier precision '" + std::string(s) + "'");
}

inline std::string_view to_string(OutlierStyle s) {
  switch (s) {
    case OutlierStyle::LargestNorm: return "largest_norm";
    case OutlierStyle::Random: return "random";
    case OutlierStyle::None: return "none";
  }
  return "?";
}

inline OutlierStyle parse_outlier_style(std::string_view s) {
  for (auto st : {OutlierStyle::LargestNorm, OutlierStyle::Random, OutlierStyle::None})
    if (to_string(st) == s) return st;
  throw std::invalid_argument("unknown outlier style '" + std::string(s) + "'");
}

/// Static set of input channels kept out of FP4.
struct OutlierConfig {
  std::vector<std::size_t> channels;  // sorted, into D
  double ratio_pct = 10.0;
  OutlierPrecision precision = OutlierPrecision::E4M3;
  OutlierStyle style = OutlierStyle::LargestNorm;
};

enum class PrecisionMode : std::uint8_t { FP4xFP4 = 0, FP6xFP4 = 1, FP6xFP6 = 2 };

inline std::string_view to_string(PrecisionMode m) {
  switch (m) {
    case PrecisionMode::FP4xFP4: return "fp4xfp4";
    case PrecisionMode::FP6xFP4: return "fp6xfp4";
    case PrecisionMode::FP6xFP6: return "fp6xfp6";
  }
  return "?";
}

inline PrecisionMode parse_precision_mode(std::string_view s) {
  for (auto m : {PrecisionMode::FP4xFP4, PrecisionMode::FP6xFP4, PrecisionMode::FP6xFP6})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown precision mode '" + std::string(s) + "'");
}

struct LayerQuantConfig {
  std::array<bool, kSiteCount> enabled{};  // a disabled site passes binary32 through
  std::array<Format, kSiteCount> format{Format::E2M1, Format::E2M1, Format::E2M1,
                                        Format::E2M1, Format::E2M1, Format::E2M1};
  bool rht_dx = false;
  bool rht_dw = false;
  bool rht_fwd = false;
  Orientation weight_block = Orientation::RowGroups_1x16;
  OuterGranularity outer = OuterGranularity::Block_1x128;
  bool align_xhat = true;
  bool stochastic_backward = true;
  std::optional<OutlierConfig> outlier;
  std::size_t hadamard_block = kDefaultHadamardBlock;

  bool on(Site s) const { return enabled[static_cast<std::size_t>(s)]; }
  Format fmt(Site s) const { return format[static_cast<std::size_t>(s)]; }
  bool any_enabled() const { return std::find(enabled.begin(), enabled.end(), true) != enabled.end(); }
};

inline LayerQuantConfig preset_fp32() { return {}; }

/// All six sites in FP4, RHT on both backward matmuls, 1x16 groups with
/// 1x128 outer blocks, aligned X-hat, stochastic backward.
inline LayerQuantConfig preset_base() {
  LayerQuantConfig c;
  c.enabled.fill(true);
  c.rht_dx = true;
  c.rht_dw = true;
  return c;
}

/// Base plus outlier channels kept in E4M3 (10%). Channels are filled in by
/// select_outlier_channels once calibration activations exist.
inline LayerQuantConfig preset_full() {
  LayerQuantConfig c = preset_base();
  c.outlier = OutlierConfig{};
  return c;
}

/// Square 16x16 weight tiles under one per-tensor scale, RHT on the weight
/// gradient only, RTN everywhere and Q6 fed from raw X.
inline LayerQuantConfig preset_nvidia_recipe() {
  LayerQuantConfig c;
  c.enabled.fill(true);
  c.rht_dx = false;
  c.rht_dw = true;
  c.weight_block = Orientation::Square_16x16;
  c.outer = OuterGranularity::PerTensor;
  c.align_xhat = false;
  c.stochastic_backward = false;
  return c;
}

inline LayerQuantConfig preset(std::string_view name) {
  if (name == "fp32") return preset_fp32();
  if (name == "base") return preset_base();
  if (name == "full") return preset_full();
  if (name == "nvidia_recipe") return preset_nvidia_recipe();
  throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

/// FP6xFP4 lifts X, dY in the dX product and X-hat in the dW product to FP6;
/// FP6xFP6 lifts all six sites.
inline LayerQuantConfig set_precision_mode(LayerQuantConfig cfg, PrecisionMode mode,
                                           Format fp6 = Format::FP6_E3M2) {
  cfg.format.fill(Format::E2M1);
  if (mode == PrecisionMode::FP6xFP4) {
    for (Site s : {Site::FwdX, Site::InputDy, Site::WeightX}) cfg.format[static_cast<std::size_t>(s)] = fp6;
  } else if (mode == PrecisionMode::FP6xFP6) {
    cfg.format.fill(fp6);
  }
  return cfg;
}

/// Identifies one layer call; all randomness of the call derives from it.
struct StepKey {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
};

struct LinearCache {
  Matrix x_hat;  // exactly what the forward matmul consumed, outlier columns included
  Matrix w_hat;
  Matrix x_raw;  // kept only when align_xhat is off
  StepKey key;
};

struct ForwardResult {
  Matrix y;
  LinearCache cache;
};

struct BackwardResult {
  Matrix dx;
  Matrix dw;
};

namespace detail {

inline void check_outliers(const LayerQuantConfig& cfg, std::size_t d) {
  if (!cfg.outlier) return;
  for (std::size_t c : cfg.outlier->channels)
    if (c >= d) throw std::out_of_range("outlier channel " + std::to_string(c) + " >= D " + std::to_string(d));
}

inline void zero_columns(Matrix& m, const std::vector<std::size_t>& cols) {
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c : cols) m(r, c) = 0.0f;
}

/// Rounds one column to the outlier precision. E4M3 uses a per-column
/// scale amax / 448.
inline void round_outlier_column(const Matrix& src, Matrix& dst, std::size_t c, OutlierPrecision p) {
  if (p == OutlierPrecision::Binary32) {
    for (std::size_t r = 0; r < src.rows; ++r) dst(r, c) = src(r, c);
    return;
  }
  if (p == OutlierPrecision::Binary16) {
    for (std::size_t r = 0; r < src.rows; ++r) dst(r, c) = static_cast<float>(round_binary16(src(r, c)));
    return;
  }
  double amax = 0.0;
  for (std::size_t r = 0; r < src.rows; ++r) amax = std::max(amax, static_cast<double>(std::fabs(src(r, c))));
  const double s = amax > 0.0 ? static_cast<double>(static_cast<float>(amax / kE4M3Max)) : 1.0;
  const FormatSpec& e4m3 = format_spec(Format::E4M3);
  for (std::size_t r = 0; r < src.rows; ++r) {
    const double v = e4m3.round(src(r, c) / s, RoundingMode::Deterministic, nullptr, Overflow::Clamp).value;
    dst(r, c) = v == 0.0 ? 0.0f : static_cast<float>(v * s);
  }
}

inline QuantSpec site_spec(const LayerQuantConfig& cfg, Site s, Orientation o) {
  QuantSpec spec;
  spec.orientation = o;
  spec.outer = cfg.outer;
  spec.element = cfg.fmt(s);
  return spec;
}

/// Quantizes both operands of A B^T (contraction along columns), optionally
/// after a shared RHT, and returns the product.
inline Matrix quantized_product(Matrix a, Matrix b, const LayerQuantConfig& cfg, Site sa, Site sb,
                                Orientation ob, bool rht, const RhtContext* ctx, RoundingMode mode,
                                RngStream& rng, QuantStats* stats) {
  if (rht) {
    a = rht_apply(a, *ctx);
    b = rht_apply(b, *ctx);
  }
  if (cfg.on(sa)) a = fake_quantize(a, site_spec(cfg, sa, Orientation::RowGroups_1x16), mode, &rng, stats);
  if (cfg.on(sb)) b = fake_quantize(b, site_spec(cfg, sb, ob), mode, &rng, stats);
  return matmul_nt(a, b);
}

}  // namespace detail

/// Y = X-hat W-hat^T for x [N x D] and w [C x D]. Forward quantizers use RTN.
inline ForwardResult linear_forward(const Matrix& x, const Matrix& w, const LayerQuantConfig& cfg,
                                    const StepKey& key, QuantStats* stats = nullptr) {
  if (x.cols != w.cols)
    throw std::invalid_argument("linear_forward: x.cols " + std::to_string(x.cols) + " != w.cols " +
                                std::to_string(w.cols));
  detail::check_outliers(cfg, x.cols);
  const bool split = cfg.outlier && !cfg.outlier->channels.empty() && cfg.on(Site::FwdX);

  ForwardResult out;
  LinearCache& cache = out.cache;
  cache.key = key;
  if (!cfg.align_xhat) cache.x_raw = x;

  Matrix xin = x;
  if (split) detail::zero_columns(xin, cfg.outlier->channels);

  const bool rotate = cfg.rht_fwd && (cfg.on(Site::FwdX) || cfg.on(Site::FwdW));
  std::optional<RhtContext> ctx;
  if (rotate) {
    ctx = make_rht_context(x.cols, key.seed, key.layer, key.step, RhtSide::Forward, cfg.hadamard_block);
    xin = rht_apply(xin, *ctx);
  }
  if (cfg.on(Site::FwdX))
    xin = fake_quantize(xin, detail::site_spec(cfg, Site::FwdX, Orientation::RowGroups_1x16),
                        RoundingMode::Deterministic, nullptr, stats);
  cache.x_hat = rotate ? rht_invert(xin, *ctx) : std::move(xin);

  if (cfg.on(Site::FwdW)) {
    const Matrix wq = fake_quantize(rotate ? rht_apply(w, *ctx) : w,
                                    detail::site_spec(cfg, Site::FwdW, cfg.weight_block), RoundingMode::Deterministic,
                                    nullptr, stats);
    cache.w_hat = rotate ? rht_invert(wq, *ctx) : wq;
  } else {
    cache.w_hat = rotate ? rht_invert(rht_apply(w, *ctx), *ctx) : w;
  }

  if (split)
    for (std::size_t c : cfg.outlier->channels)
      detail::round_outlier_column(x, cache.x_hat, c, cfg.outlier->precision);

  out.y = matmul_nt(cache.x_hat, cache.w_hat);
  return out;
}

/// Gradients of the quantized layer under the straight-through convention:
/// targets are dY W-hat and dY^T X-hat. Backward quantizers round
/// stochastically unless cfg.stochastic_backward is off.
inline BackwardResult linear_backward(const Matrix& dy, const LinearCache& cache, const LayerQuantConfig& cfg,
                                      std::uint64_t step, QuantStats* stats = nullptr) {
  if (step != cache.key.step)
    throw std::invalid_argument("linear_backward: step " + std::to_string(step) + " does not match cache step " +
                                std::to_string(cache.key.step));
  const std::size_t n = cache.x_hat.rows, d = cache.x_hat.cols, c = cache.w_hat.rows;
  if (dy.rows != n || dy.cols != c)
    throw std::invalid_argument("linear_backward: dy shape does not match the cached forward");
  detail::check_outliers(cfg, d);
  const auto mode = cfg.stochastic_backward ? RoundingMode::Stochastic : RoundingMode::Deterministic;
  const StepKey& k = cache.key;
  RngStream rng(derive_key({k.seed, label_hash("backward"), k.layer, k.step}));

  BackwardResult out;
  {
    std::optional<RhtContext> ctx;
    if (cfg.rht_dx) ctx = make_rht_context(c, k.seed, k.layer, k.step, RhtSide::GradInput, cfg.hadamard_block);
    const Orientation ob =
        cfg.weight_block == Orientation::Square_16x16 ? Orientation::Square_16x16 : Orientation::RowGroups_1x16;
    if (cfg.on(Site::InputDy) || cfg.on(Site::InputW))
      out.dx = detail::quantized_product(dy, transpose(cache.w_hat), cfg, Site::InputDy, Site::InputW, ob,
                                         cfg.rht_dx, ctx ? &*ctx : nullptr, mode, rng, stats);
    else
      out.dx = matmul(dy, cache.w_hat);
  }

  const bool split = cfg.outlier && !cfg.outlier->channels.empty() && cfg.on(Site::FwdX);
  Matrix xs = cfg.align_xhat ? cache.x_hat : cache.x_raw;
  if (split) detail::zero_columns(xs, cfg.outlier->channels);
  {
    std::optional<RhtContext> ctx;
    if (cfg.rht_dw) ctx = make_rht_context(n, k.seed, k.layer, k.step, RhtSide::GradWeight, cfg.hadamard_block);
    if (cfg.on(Site::WeightDy) || cfg.on(Site::WeightX))
      out.dw = detail::quantized_product(transpose(dy), transpose(xs), cfg, Site::WeightDy, Site::WeightX,
                                         Orientation::RowGroups_1x16, cfg.rht_dw, ctx ? &*ctx : nullptr, mode,
                                         rng, stats);
    else
      out.dw = matmul_tn(dy, xs);
  }
  if (split) {
    for (std::size_t col : cfg.outlier->channels)
      for (std::size_t i = 0; i < c; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < n; ++r) s += static_cast<double>(dy(r, i)) * cache.x_hat(r, col);
        out.dw(i, col) = static_cast<float>(s);
      }
  }
  return out;
}

/// Picks round(p% * D) channels from calibration activations [N x D].
/// LargestNorm ranks by L2 norm summed over batches; Random draws uniformly
/// from `rng`. The result is sorted.
inline OutlierConfig select_outlier_channels(const std::vector<Matrix>& calibration, double p, OutlierStyle style,
                                             RngStream* rng = nullptr,
                                             OutlierPrecision precision = OutlierPrecision::E4M3) {
  if (calibration.empty()) throw std::invalid_argument("select_outlier_channels: empty calibration set");
  if (p < 0.0 || p > 100.0) throw std::invalid_argument("select_outlier_channels: p outside [0, 100]");
  const std::size_t d = calibration.front().cols;
  for (const Matrix& m : calibration)
    if (m.cols != d) throw std::invalid_argument("select_outlier_channels: inconsistent widths");

  OutlierConfig cfg;
  cfg.ratio_pct = p;
  cfg.precision = precision;
  cfg.style = style;
  if (style == OutlierStyle::None) return cfg;
  const auto count = static_cast<std::size_t>(std::llround(p / 100.0 * static_cast<double>(d)));

  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  if (style == OutlierStyle::LargestNorm) {
    std::vector<double> sq(d, 0.0);
    for (const Matrix& m : calibration)
      for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t col = 0; col < d; ++col) sq[col] += static_cast<double>(m(r, col)) * m(r, col);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sq[a] > sq[b]; });
  } else {
    if (rng == nullptr) throw std::invalid_argument("random outlier selection needs an RngStream");
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng->uniform_index(d - i)]);
  }
  cfg.channels.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(cfg.channels.begin(), cfg.channels.end());
  return cfg;
}

}  // namespace fp4sim
