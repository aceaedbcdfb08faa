// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Double-block NVFP4 quantization: a binary32 outer scale per outer block
// keeps every inner (1x16) E4M3 scale inside [0, 448]. MXFP4 (1x32 groups,
// E8M0 power-of-two scales, no outer block) shares the same storage.
//
// Grouping runs along a "line": a row for RowGroups, a column for ColGroups.
// Lengths that are not a multiple of the group size are padded conceptually;
// the padded tail never contributes to any amax and is never stored.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fp4sim/fpcodec.hpp"
#include "fp4sim/matrix.hpp"
#include "fp4sim/rng.hpp"

namespace fp4sim {

enum class Orientation : std::uint8_t {
  RowGroups_1x16 = 0,
  ColGroups_16x1 = 1,
  Square_16x16 = 2,
};

enum class OuterGranularity : std::uint8_t {
  Block_1x128 = 0,
  PerRow = 1,  // one outer scale per line
  PerTensor = 2,
  None = 3,    // no outer level (MXFP4)
};

/// How inner scales are rounded onto the scale grid. Auto rounds to nearest
/// for deterministic quantization and upward for stochastic quantization, so
/// stochastic codes never need clamping.
enum class ScaleRounding : std::uint8_t { Auto, Nearest, Up };

inline constexpr unsigned kOuterBlock = 128;

inline std::string_view to_string(Orientation o) {
  switch (o) {
    case Orientation::RowGroups_1x16: return "RowGroups_1x16";
    case Orientation::ColGroups_16x1: return "ColGroups_16x1";
    case Orientation::Square_16x16: return "Square_16x16";
  }
  return "?";
}

inline std::string_view to_string(OuterGranularity g) {
  switch (g) {
    case OuterGranularity::Block_1x128: return "Block_1x128";
    case OuterGranularity::PerRow: return "PerRow";
    case OuterGranularity::PerTensor: return "PerTensor";
    case OuterGranularity::None: return "None";
  }
  return "?";
}

inline Orientation parse_orientation(std::string_view s) {
  if (s == "RowGroups_1x16" || s == "row" || s == "1x16") return Orientation::RowGroups_1x16;
  if (s == "ColGroups_16x1" || s == "col" || s == "16x1") return Orientation::ColGroups_16x1;
  if (s == "Square_16x16" || s == "square" || s == "16x16") return Orientation::Square_16x16;
  throw std::invalid_argument("unknown orientation: " + std::string(s));
}

inline OuterGranularity parse_outer(std::string_view s) {
  if (s == "Block_1x128" || s == "1x128" || s == "block") return OuterGranularity::Block_1x128;
  if (s == "PerRow" || s == "row") return OuterGranularity::PerRow;
  if (s == "PerTensor" || s == "tensor") return OuterGranularity::PerTensor;
  if (s == "None" || s == "none") return OuterGranularity::None;
  throw std::invalid_argument("unknown outer granularity: " + std::string(s));
}

struct QuantSpec {
  Orientation orientation = Orientation::RowGroups_1x16;
  OuterGranularity outer = OuterGranularity::Block_1x128;
  Format element = Format::E2M1;
  Format scale_format = Format::E4M3;
  unsigned group = 16;
  ScaleRounding scale_rounding = ScaleRounding::Auto;
};

struct QuantStats {
  std::size_t clamp_events = 0;  // elements with |x / scale| above the element max
};

struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Orientation orientation = Orientation::RowGroups_1x16;
  OuterGranularity outer = OuterGranularity::Block_1x128;
  Format element = Format::E2M1;
  Format scale_format = Format::E4M3;
  std::uint32_t group = 16;
  /// 4-bit elements: two codes per byte, low nibble holds the lower linear
  /// (row-major) index. Wider elements: one code per byte.
  std::vector<std::uint8_t> codes;
  std::vector<std::uint8_t> inner_scales;  // scale-format codes, one per inner block
  std::vector<float> outer_scales;         // one per outer block

  bool packed() const noexcept { return format_spec(element).bits() <= 4; }

  std::uint8_t code(std::size_t i) const {
    if (!packed()) return codes[i];
    const std::uint8_t b = codes[i / 2];
    return (i % 2 == 0) ? (b & 0x0f) : (b >> 4);
  }

  void set_code(std::size_t i, std::uint8_t c) {
    if (!packed()) {
      codes[i] = c;
      return;
    }
    std::uint8_t& b = codes[i / 2];
    b = (i % 2 == 0) ? static_cast<std::uint8_t>((b & 0xf0) | (c & 0x0f))
                     : static_cast<std::uint8_t>((b & 0x0f) | (c << 4));
  }

  double inner_scale(std::size_t b) const { return format_spec(scale_format).decode(inner_scales[b]); }

  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

/// Index arithmetic shared by quantize/dequantize.
class BlockGeometry {
 public:
  BlockGeometry(std::size_t rows, std::size_t cols, Orientation o, OuterGranularity outer,
                unsigned group)
      : rows_(rows), cols_(cols), orient_(o), outer_(outer), group_(group) {
    if (group == 0) throw std::invalid_argument("group size must be positive");
    if (o == Orientation::Square_16x16) {
      tile_rows_ = ceil_div(rows, group);
      tile_cols_ = ceil_div(cols, group);
      n_inner_ = tile_rows_ * tile_cols_;
      n_outer_ = outer == OuterGranularity::None ? 0 : 1;
      return;
    }
    lines_ = o == Orientation::RowGroups_1x16 ? rows : cols;
    len_ = o == Orientation::RowGroups_1x16 ? cols : rows;
    per_line_ = ceil_div(len_, group);
    n_inner_ = lines_ * per_line_;
    switch (outer) {
      case OuterGranularity::Block_1x128:
        if (kOuterBlock % group != 0) throw std::invalid_argument("outer block must hold whole groups");
        outer_per_line_ = ceil_div(len_, kOuterBlock);
        n_outer_ = lines_ * outer_per_line_;
        break;
      case OuterGranularity::PerRow: n_outer_ = lines_; break;
      case OuterGranularity::PerTensor: n_outer_ = 1; break;
      case OuterGranularity::None: n_outer_ = 0; break;
    }
  }

  std::size_t inner_count() const noexcept { return n_inner_; }
  std::size_t outer_count() const noexcept { return n_outer_; }

  std::size_t outer_of(std::size_t b) const noexcept {
    if (orient_ == Orientation::Square_16x16) return 0;
    switch (outer_) {
      case OuterGranularity::Block_1x128:
        return (b / per_line_) * outer_per_line_ + ((b % per_line_) * group_) / kOuterBlock;
      case OuterGranularity::PerRow: return b / per_line_;
      default: return 0;
    }
  }

  /// Calls f(flat_index) for every real element of inner block b, in a fixed
  /// order (along the line, or row-major within a tile).
  template <class F>
  void visit(std::size_t b, F&& f) const {
    if (orient_ == Orientation::Square_16x16) {
      const std::size_t r0 = (b / tile_cols_) * group_;
      const std::size_t c0 = (b % tile_cols_) * group_;
      const std::size_t r1 = std::min(rows_, r0 + group_);
      const std::size_t c1 = std::min(cols_, c0 + group_);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) f(r * cols_ + c);
      return;
    }
    const std::size_t line = b / per_line_;
    const std::size_t k0 = (b % per_line_) * group_;
    const std::size_t k1 = std::min(len_, k0 + group_);
    if (orient_ == Orientation::RowGroups_1x16) {
      for (std::size_t k = k0; k < k1; ++k) f(line * cols_ + k);
    } else {
      for (std::size_t k = k0; k < k1; ++k) f(k * cols_ + line);
    }
  }

 private:
  static std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

  std::size_t rows_, cols_;
  Orientation orient_;
  OuterGranularity outer_;
  std::size_t group_;
  std::size_t lines_ = 0, len_ = 0, per_line_ = 0, outer_per_line_ = 0;
  std::size_t tile_rows_ = 0, tile_cols_ = 0;
  std::size_t n_inner_ = 0, n_outer_ = 0;
};

/// Outer scale S_global = amax / (448 * element_max), stored in binary32.
///
/// Returns the smallest float g whose dequantized block maximum,
/// float(g * 448 * element_max), still reaches amax. That is float(amax / c)
/// up to one ulp, and it makes the scale idempotent: re-quantizing a
/// dequantized block reproduces the same S_global exactly.
inline float global_scale(double amax, double element_max) {
  if (amax <= 0.0) return 1.0f;
  const double c = kE4M3Max * element_max;
  const auto reaches = [&](float g) { return static_cast<double>(static_cast<float>(g * c)) >= amax; };
  float g = static_cast<float>(amax / c);
  while (!reaches(g)) g = std::nextafter(g, std::numeric_limits<float>::infinity());
  for (;;) {
    const float p = std::nextafter(g, 0.0f);
    if (p > 0.0f && reaches(p)) g = p;
    else break;
  }
  return g;
}

/// Smallest power of two >= s, clamped to the E8M0 range.
inline double pow2_ceil_e8m0(double s) {
  int e;
  const double m = std::frexp(s, &e);  // s = m * 2^e, m in [0.5, 1)
  int k = (m == 0.5) ? e - 1 : e;
  k = std::clamp(k, -127, 127);
  return std::ldexp(1.0, k);
}

inline QuantizedMatrix quantize(const Matrix& m, const QuantSpec& spec, RoundingMode mode,
                                RngStream* rng = nullptr, QuantStats* stats = nullptr) {
  if (mode == RoundingMode::Stochastic && rng == nullptr)
    throw std::invalid_argument("stochastic quantization needs an RngStream");
  const FormatSpec& elem = format_spec(spec.element);
  const FormatSpec& sfmt = format_spec(spec.scale_format);
  if (spec.scale_format != Format::E4M3 && spec.scale_format != Format::E8M0)
    throw std::invalid_argument("scale format must be E4M3 or E8M0");
  const double pmax = elem.max_normal();

  QuantizedMatrix q;
  q.rows = m.rows;
  q.cols = m.cols;
  q.orientation = spec.orientation;
  q.outer = spec.outer;
  if (spec.orientation == Orientation::Square_16x16 && spec.outer != OuterGranularity::None)
    q.outer = OuterGranularity::PerTensor;
  if (spec.scale_format == Format::E8M0) q.outer = OuterGranularity::None;
  q.element = spec.element;
  q.scale_format = spec.scale_format;
  q.group = spec.group;

  const BlockGeometry geo(m.rows, m.cols, q.orientation, q.outer, spec.group);
  const std::size_t n_inner = geo.inner_count();

  std::vector<double> inner_amax(n_inner, 0.0);
  for (std::size_t b = 0; b < n_inner; ++b) {
    double a = 0.0;
    geo.visit(b, [&](std::size_t i) { a = std::max(a, static_cast<double>(std::fabs(m.data[i]))); });
    inner_amax[b] = a;
  }

  q.outer_scales.assign(geo.outer_count(), 1.0f);
  if (geo.outer_count() > 0) {
    std::vector<double> outer_amax(geo.outer_count(), 0.0);
    for (std::size_t b = 0; b < n_inner; ++b) {
      double& o = outer_amax[geo.outer_of(b)];
      o = std::max(o, inner_amax[b]);
    }
    for (std::size_t o = 0; o < outer_amax.size(); ++o) q.outer_scales[o] = global_scale(outer_amax[o], pmax);
  }

  const bool round_up = spec.scale_rounding == ScaleRounding::Up ||
                        (spec.scale_rounding == ScaleRounding::Auto && mode == RoundingMode::Stochastic);

  q.inner_scales.assign(n_inner, 0);
  q.codes.assign(elem.bits() <= 4 ? (m.size() + 1) / 2 : m.size(), 0);
  std::size_t clamps = 0;
  const std::uint8_t sign_bit = static_cast<std::uint8_t>(1u << (elem.bits() - 1));

  for (std::size_t b = 0; b < n_inner; ++b) {
    const double sg = geo.outer_count() > 0 ? static_cast<double>(q.outer_scales[geo.outer_of(b)]) : 1.0;
    double sb = 1.0;
    if (inner_amax[b] > 0.0) {
      const double ratio = inner_amax[b] / sg / pmax;
      if (spec.scale_format == Format::E8M0) {
        sb = pow2_ceil_e8m0(ratio);
      } else {
        const double r = std::min(ratio, kE4M3Max);
        sb = round_up ? round_scale_e4m3_up(r) : round_scale_e4m3(r);
      }
    }
    q.inner_scales[b] = sfmt.encode(sb);
    const double scale = sb * sg;
    geo.visit(b, [&](std::size_t i) {
      const double v = static_cast<double>(m.data[i]) / scale;
      double a = std::fabs(v);
      if (a > pmax) {
        if (a > pmax * (1.0 + 1e-6)) ++clamps;  // ignore one-ulp scale slop
        a = pmax;
      }
      const unsigned u = elem.round_index(a, mode, rng);
      const bool neg = std::signbit(v);
      q.set_code(i, static_cast<std::uint8_t>((neg ? sign_bit : 0) | u));
    });
  }
  if (stats) stats->clamp_events += clamps;
  return q;
}

inline QuantizedMatrix quantize_double_block(const Matrix& m, Orientation orientation,
                                             OuterGranularity outer, RoundingMode mode,
                                             RngStream* rng = nullptr, Format element = Format::E2M1,
                                             QuantStats* stats = nullptr) {
  QuantSpec spec;
  spec.orientation = orientation;
  spec.outer = outer;
  spec.element = element;
  return quantize(m, spec, mode, rng, stats);
}

inline QuantizedMatrix quantize_mxfp4(const Matrix& m, RoundingMode mode, RngStream* rng = nullptr,
                                      Orientation orientation = Orientation::RowGroups_1x16) {
  QuantSpec spec;
  spec.orientation = orientation;
  spec.outer = OuterGranularity::None;
  spec.scale_format = Format::E8M0;
  spec.group = 32;
  return quantize(m, spec, mode, rng);
}

/// Calls f(flat_index, combined_scale) for every element.
template <class F>
void for_each_scaled(const QuantizedMatrix& q, F&& f) {
  const BlockGeometry geo(q.rows, q.cols, q.orientation, q.outer, q.group);
  const FormatSpec& sfmt = format_spec(q.scale_format);
  for (std::size_t b = 0; b < geo.inner_count(); ++b) {
    const double sg = geo.outer_count() > 0 ? static_cast<double>(q.outer_scales[geo.outer_of(b)]) : 1.0;
    const double scale = sfmt.decode(q.inner_scales[b]) * sg;
    geo.visit(b, [&](std::size_t i) { f(i, scale); });
  }
}

/// Per-element S_block * S_global, row-major.
inline std::vector<double> element_scales(const QuantizedMatrix& q) {
  std::vector<double> s(q.rows * q.cols, 1.0);
  for_each_scaled(q, [&](std::size_t i, double scale) { s[i] = scale; });
  return s;
}

inline Matrix dequantize(const QuantizedMatrix& q) {
  Matrix out(q.rows, q.cols);
  const FormatSpec& elem = format_spec(q.element);
  for_each_scaled(q, [&](std::size_t i, double scale) {
    const double p = elem.decode(q.code(i));
    out.data[i] = p == 0.0 ? 0.0f : static_cast<float>(p * scale);
  });
  return out;
}

/// dequantize, then quantize again under a new grouping. Stochastic mode is
/// unbiased with respect to dequantize(q).
inline QuantizedMatrix requantize(const QuantizedMatrix& q, Orientation orientation, RoundingMode mode,
                                  RngStream* rng = nullptr, QuantStats* stats = nullptr) {
  QuantSpec spec;
  spec.orientation = orientation;
  spec.outer = q.outer;
  spec.element = q.element;
  spec.scale_format = q.scale_format;
  spec.group = q.group;
  return quantize(dequantize(q), spec, mode, rng, stats);
}

namespace detail {

// RTN code index for n magnitudes already clamped to the element max.
// Midpoint j sits between codes j and j + 1; an exact tie goes up only
// when j is odd, which lands on the even code.
template <std::size_t Top>
inline void rtn_indices(const double* a, std::uint32_t* idx, std::size_t n, const double* mids) {
  std::array<double, Top> m;
  std::copy(mids, mids + Top, m.begin());
  for (std::size_t c = 0; c < n; ++c) {
    const double x = a[c];
    std::uint32_t k = 0;
    for (std::size_t j = 0; j < Top; ++j) k += j % 2 == 1 ? x >= m[j] : x > m[j];
    idx[c] = k;
  }
}

// Index of the largest magnitude <= a; `upper` holds magnitudes 1..Top.
template <std::size_t Top>
inline void floor_indices(const double* a, std::uint32_t* idx, std::size_t n, const double* upper) {
  std::array<double, Top> m;
  std::copy(upper, upper + Top, m.begin());
  for (std::size_t c = 0; c < n; ++c) {
    std::uint32_t k = 0;
    for (std::size_t j = 0; j < Top; ++j) k += a[c] >= m[j];
    idx[c] = k;
  }
}

// Fused quantize + dequantize for 1x16-style row groups with E4M3 scales.
// Scale derivation, element rounding and random-number consumption follow
// quantize() exactly, so results are bit-identical to the unfused path.
//
// RTN is evaluated against bin midpoints: near a midpoint both a - q1 and
// q2 - a are exact (Sterbenz), so "a > mid" decides the same way as
// comparing the two distances. Ties go to the even code.
inline Matrix fake_quantize_rows(const Matrix& m, const QuantSpec& spec, RoundingMode mode, RngStream* rng,
                                 QuantStats* stats) {
  const FormatSpec& elem = format_spec(spec.element);
  const auto mags = elem.magnitudes();
  const std::size_t top = mags.size() - 1;
  std::vector<double> padded(mags.begin(), mags.end());
  padded.push_back(mags.back());
  std::vector<double> mids(top);
  for (std::size_t j = 0; j < top; ++j) mids[j] = 0.5 * (mags[j] + mags[j + 1]);
  const double pmax = elem.max_normal();
  const double clamp_limit = pmax * (1.0 + 1e-6);
  const bool stochastic = mode == RoundingMode::Stochastic;
  const bool round_up = spec.scale_rounding == ScaleRounding::Up ||
                        (spec.scale_rounding == ScaleRounding::Auto && stochastic);
  const std::size_t g = spec.group;
  const std::size_t cols = m.cols;
  const std::size_t per_line = (cols + g - 1) / g;
  if (spec.outer == OuterGranularity::Block_1x128 && kOuterBlock % g != 0)
    throw std::invalid_argument("outer block must hold whole groups");

  std::vector<double> amax(m.rows * per_line, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const float* row = m.data.data() + r * cols;
    for (std::size_t k = 0; k < per_line; ++k) {
      float a = 0.0f;
      for (std::size_t c = k * g, e = std::min(cols, c + g); c < e; ++c) a = std::max(a, std::fabs(row[c]));
      amax[r * per_line + k] = a;
    }
  }
  double tensor_amax = 0.0;
  if (spec.outer == OuterGranularity::PerTensor)
    for (double a : amax) tensor_amax = std::max(tensor_amax, a);
  const float tensor_sg = global_scale(tensor_amax, pmax);

  Matrix out(m.rows, cols);
  std::size_t clamps = 0;
  std::vector<double> scale(cols), v(cols), a(cols), frac(cols);
  std::vector<std::uint32_t> idx(cols);
  const std::size_t per_outer = kOuterBlock / g;
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* am = amax.data() + r * per_line;
    double line_amax = 0.0;
    if (spec.outer == OuterGranularity::PerRow)
      for (std::size_t k = 0; k < per_line; ++k) line_amax = std::max(line_amax, am[k]);
    const float row_sg = global_scale(line_amax, pmax);
    float sg_block = 1.0f;
    for (std::size_t k = 0; k < per_line; ++k) {
      float sgf = 1.0f;
      switch (spec.outer) {
        case OuterGranularity::Block_1x128:
          if (k % per_outer == 0) {
            double o = 0.0;
            for (std::size_t j = k, e = std::min(per_line, k + per_outer); j < e; ++j) o = std::max(o, am[j]);
            sg_block = global_scale(o, pmax);
          }
          sgf = sg_block;
          break;
        case OuterGranularity::PerRow: sgf = row_sg; break;
        case OuterGranularity::PerTensor: sgf = tensor_sg; break;
        case OuterGranularity::None: break;
      }
      const double sg = spec.outer == OuterGranularity::None ? 1.0 : static_cast<double>(sgf);
      double sb = 1.0;
      if (am[k] > 0.0) {
        const double rr = std::min(am[k] / sg / pmax, kE4M3Max);
        sb = round_up ? round_scale_e4m3_up(rr) : round_scale_e4m3(rr);
      }
      std::fill(scale.begin() + static_cast<std::ptrdiff_t>(k * g),
                scale.begin() + static_cast<std::ptrdiff_t>(std::min(cols, (k + 1) * g)), sb * sg);
    }

    const float* src = m.data.data() + r * cols;
    std::size_t row_clamps = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      v[c] = static_cast<double>(src[c]) / scale[c];
      const double t = std::fabs(v[c]);
      row_clamps += t > clamp_limit;
      a[c] = std::min(t, pmax);
    }
    clamps += row_clamps;

    if (stochastic) {
      if (top == 7) floor_indices<7>(a.data(), idx.data(), cols, mags.data() + 1);
      else if (top == 31) floor_indices<31>(a.data(), idx.data(), cols, mags.data() + 1);
      else
        for (std::size_t c = 0; c < cols; ++c) {
          std::uint32_t lo = 0;
          for (std::size_t j = 1; j <= top; ++j) lo += a[c] >= mags[j];
          idx[c] = lo;
        }
      // q2 == q1 only at the top code, where a == q1 as well.
      for (std::size_t c = 0; c < cols; ++c) {
        const double q1 = padded[idx[c]], q2 = padded[idx[c] + 1];
        frac[c] = q1 == a[c] ? 0.0 : (a[c] - q1) / (q2 - q1);
      }
      for (std::size_t c = 0; c < cols; ++c)
        if (frac[c] > 0.0 && rng->uniform() < frac[c]) ++idx[c];
    } else if (top == 7) {
      rtn_indices<7>(a.data(), idx.data(), cols, mids.data());
    } else if (top == 31) {
      rtn_indices<31>(a.data(), idx.data(), cols, mids.data());
    } else {
      for (std::size_t c = 0; c < cols; ++c) {
        std::uint32_t n = 0;
        for (std::size_t j = 0; j < top; ++j) n += (a[c] > mids[j]) | (j % 2 == 1 && a[c] == mids[j]);
        idx[c] = n;
      }
    }

    float* dst = out.data.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = padded[idx[c]];
      dst[c] = p == 0.0 ? 0.0f : static_cast<float>(std::copysign(p, v[c]) * scale[c]);
    }
  }
  if (stats) stats->clamp_events += clamps;
  return out;
}

}  // namespace detail

/// dequantize(quantize(m)) in one call.
inline Matrix fake_quantize(const Matrix& m, const QuantSpec& spec, RoundingMode mode,
                            RngStream* rng = nullptr, QuantStats* stats = nullptr) {
  if (mode == RoundingMode::Stochastic && rng == nullptr)
    throw std::invalid_argument("stochastic quantization needs an RngStream");
  if (spec.orientation == Orientation::RowGroups_1x16 && spec.scale_format == Format::E4M3 &&
      std::has_single_bit(spec.group) &&
      spec.element != Format::E4M3 && spec.element != Format::E8M0)
    return detail::fake_quantize_rows(m, spec, mode, rng, stats);
  return dequantize(quantize(m, spec, mode, rng, stats));
}

/// Reference fake quantization through the packed representation.
inline Matrix fake_quantize_unfused(const Matrix& m, const QuantSpec& spec, RoundingMode mode,
                                    RngStream* rng = nullptr, QuantStats* stats = nullptr) {
  return dequantize(quantize(m, spec, mode, rng, stats));
}

}  // namespace fp4sim
