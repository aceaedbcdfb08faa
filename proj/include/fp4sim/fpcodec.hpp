// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Low-precision scalar formats (E2M1, E4M3, E8M0, FP6) and the two rounding
// modes everything else is built on.
//
// Every format is described by an explicit value table indexed by its
// unsigned code, so rounding is a search over representable magnitudes rather
// than bit manipulation. Signed formats put the sign in the top code bit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fp4sim/rng.hpp"

namespace fp4sim {

enum class Format : std::uint8_t {
  E2M1 = 0,
  E4M3 = 1,
  E8M0 = 2,
  FP6_E3M2 = 3,
  FP6_E2M3 = 4,
};

enum class RoundingMode : std::uint8_t { Deterministic = 0, Stochastic = 1 };

/// What to do with inputs beyond the largest finite magnitude.
enum class Overflow : std::uint8_t { Throw, Clamp };

inline std::string_view to_string(Format f) {
  switch (f) {
    case Format::E2M1: return "E2M1";
    case Format::E4M3: return "E4M3";
    case Format::E8M0: return "E8M0";
    case Format::FP6_E3M2: return "FP6_E3M2";
    case Format::FP6_E2M3: return "FP6_E2M3";
  }
  return "?";
}

inline Format parse_format(std::string_view s) {
  if (s == "E2M1" || s == "FP4") return Format::E2M1;
  if (s == "E4M3" || s == "FP8") return Format::E4M3;
  if (s == "E8M0") return Format::E8M0;
  if (s == "FP6_E3M2" || s == "E3M2" || s == "FP6") return Format::FP6_E3M2;
  if (s == "FP6_E2M3" || s == "E2M3") return Format::FP6_E2M3;
  throw std::invalid_argument("unknown format: " + std::string(s));
}

/// A code together with the value it decodes to (signed; may be -0.0).
struct CodePoint {
  std::uint8_t code = 0;
  double value = 0.0;
};

class FormatSpec {
 public:
  Format name() const noexcept { return name_; }
  int bits() const noexcept { return bits_; }
  bool is_signed() const noexcept { return signed_; }
  std::size_t code_count() const noexcept { return std::size_t{1} << bits_; }
  double max_normal() const noexcept { return magnitudes_.back(); }

  /// Finite magnitudes, ascending, indexed by unsigned code.
  std::span<const double> magnitudes() const noexcept { return magnitudes_; }

  /// Distinct representable values in ascending order (zero listed once).
  std::vector<double> values() const {
    std::vector<double> out;
    if (signed_) {
      for (auto it = magnitudes_.rbegin(); it != magnitudes_.rend(); ++it)
        if (*it != 0.0) out.push_back(-*it);
    }
    out.insert(out.end(), magnitudes_.begin(), magnitudes_.end());
    return out;
  }

  double decode(std::uint8_t code) const {
    if (code >= code_count()) throw std::out_of_range("code outside format");
    const std::uint8_t u = code & unsigned_mask();
    const bool neg = signed_ && (code & sign_bit()) != 0;
    double v = u < magnitudes_.size() ? magnitudes_[u] : std::numeric_limits<double>::quiet_NaN();
    return neg ? -v : v;
  }

  /// Exact encoding of a representable value. NaN maps to the format's NaN
  /// code (sign kept) where one exists.
  std::uint8_t encode(double v) const {
    const bool neg = std::signbit(v);
    if (neg && !signed_) throw std::domain_error("negative value in unsigned format");
    const std::uint8_t sign = neg ? sign_bit() : 0;
    if (std::isnan(v)) {
      if (nan_code_ < 0) throw std::domain_error("format has no NaN encoding");
      return static_cast<std::uint8_t>(sign | nan_code_);
    }
    const double a = std::fabs(v);
    auto it = std::lower_bound(magnitudes_.begin(), magnitudes_.end(), a);
    if (it == magnitudes_.end() || *it != a)
      throw std::domain_error("value not representable in " + std::string(to_string(name_)));
    return static_cast<std::uint8_t>(sign | (it - magnitudes_.begin()));
  }

  /// Unsigned code index of |x| rounded onto the magnitude grid. `a` must be
  /// finite, non-negative and at most max_normal().
  unsigned round_index(double a, RoundingMode mode, RngStream* rng) const {
    const auto first = magnitudes_.begin();
    auto it = std::upper_bound(first, magnitudes_.end(), a);
    if (it == first) return 0;
    const auto lo = static_cast<unsigned>(it - first - 1);
    if (magnitudes_[lo] == a || it == magnitudes_.end()) return lo;
    const double q1 = magnitudes_[lo];
    const double q2 = magnitudes_[lo + 1];
    if (mode == RoundingMode::Stochastic) {
      if (rng == nullptr) throw std::invalid_argument("stochastic rounding needs an RngStream");
      const double p = (a - q1) / (q2 - q1);
      return rng->uniform() < p ? lo + 1 : lo;
    }
    const double d1 = a - q1;
    const double d2 = q2 - a;
    if (d1 < d2) return lo;
    if (d2 < d1) return lo + 1;
    return (lo % 2 == 0) ? lo : lo + 1;  // tie: even code
  }

  CodePoint round(double x, RoundingMode mode, RngStream* rng = nullptr,
                  Overflow overflow = Overflow::Throw) const {
    if (!std::isfinite(x)) throw std::domain_error("non-finite input to rounding");
    const bool neg = std::signbit(x);
    if (neg && !signed_) throw std::domain_error("negative value in unsigned format");
    double a = std::fabs(x);
    if (a > max_normal()) {
      if (overflow == Overflow::Throw)
        throw std::domain_error("|x| exceeds max of " + std::string(to_string(name_)));
      a = max_normal();
    }
    const unsigned u = round_index(a, mode, rng);
    const auto code = static_cast<std::uint8_t>((neg ? sign_bit() : 0) | u);
    return {code, neg ? -magnitudes_[u] : magnitudes_[u]};
  }

  // Builds an IEEE-like table: subnormals at exponent field 0, no infinities.
  // `nan_unsigned` < 0 means every code is finite.
  static FormatSpec ieee_like(Format name, int ebits, int mbits, int bias, int nan_unsigned) {
    FormatSpec f;
    f.name_ = name;
    f.bits_ = 1 + ebits + mbits;
    f.signed_ = true;
    f.nan_code_ = nan_unsigned;
    const int count = 1 << (ebits + mbits);
    const int mscale = 1 << mbits;
    for (int u = 0; u < count; ++u) {
      if (u == nan_unsigned) break;
      const int e = u >> mbits;
      const int m = u & (mscale - 1);
      const double v = e == 0 ? std::ldexp(static_cast<double>(m) / mscale, 1 - bias)
                              : std::ldexp(1.0 + static_cast<double>(m) / mscale, e - bias);
      f.magnitudes_.push_back(v);
    }
    return f;
  }

  static FormatSpec e8m0() {
    FormatSpec f;
    f.name_ = Format::E8M0;
    f.bits_ = 8;
    f.signed_ = false;
    f.nan_code_ = 255;
    for (int u = 0; u < 255; ++u) f.magnitudes_.push_back(std::ldexp(1.0, u - 127));
    return f;
  }

 private:
  std::uint8_t sign_bit() const noexcept {
    return signed_ ? static_cast<std::uint8_t>(1u << (bits_ - 1)) : 0;
  }
  std::uint8_t unsigned_mask() const noexcept {
    return static_cast<std::uint8_t>((signed_ ? (1u << (bits_ - 1)) : (1u << bits_)) - 1);
  }

  Format name_ = Format::E2M1;
  int bits_ = 4;
  bool signed_ = true;
  int nan_code_ = -1;
  std::vector<double> magnitudes_;
};

inline const FormatSpec& format_spec(Format f) {
  static const FormatSpec e2m1 = FormatSpec::ieee_like(Format::E2M1, 2, 1, 1, -1);
  static const FormatSpec e4m3 = FormatSpec::ieee_like(Format::E4M3, 4, 3, 7, 127);
  static const FormatSpec e8m0 = FormatSpec::e8m0();
  static const FormatSpec e3m2 = FormatSpec::ieee_like(Format::FP6_E3M2, 3, 2, 3, -1);
  static const FormatSpec e2m3 = FormatSpec::ieee_like(Format::FP6_E2M3, 2, 3, 1, -1);
  switch (f) {
    case Format::E2M1: return e2m1;
    case Format::E4M3: return e4m3;
    case Format::E8M0: return e8m0;
    case Format::FP6_E3M2: return e3m2;
    case Format::FP6_E2M3: return e2m3;
  }
  throw std::invalid_argument("unknown format");
}

inline constexpr double kFp4Max = 6.0;
inline constexpr double kE4M3Max = 448.0;

inline CodePoint round_fp4_det(double x, Overflow overflow = Overflow::Throw) {
  return format_spec(Format::E2M1).round(x, RoundingMode::Deterministic, nullptr, overflow);
}

inline CodePoint round_fp4_stoch(double x, RngStream& rng, Overflow overflow = Overflow::Throw) {
  return format_spec(Format::E2M1).round(x, RoundingMode::Stochastic, &rng, overflow);
}

/// Round-to-nearest E4M3 scale (ties to even code). The result is never
/// zero: inputs below the smallest subnormal map to it.
inline double round_scale_e4m3(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::domain_error("scale must be positive and finite");
  if (s > kE4M3Max) throw std::overflow_error("scale exceeds E4M3 range (448)");
  const auto& f = format_spec(Format::E4M3);
  const unsigned u = f.round_index(s, RoundingMode::Deterministic, nullptr);
  return f.magnitudes()[std::max(u, 1u)];
}

/// Smallest E4M3 value >= s. Used where the scaled block must not overflow
/// the element grid (no clamping).
inline double round_scale_e4m3_up(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::domain_error("scale must be positive and finite");
  if (s > kE4M3Max) throw std::overflow_error("scale exceeds E4M3 range (448)");
  const auto mags = format_spec(Format::E4M3).magnitudes();
  return *std::lower_bound(mags.begin() + 1, mags.end(), s);
}

inline CodePoint round_fp6(double x, RoundingMode mode, RngStream* rng = nullptr,
                           Format variant = Format::FP6_E3M2, Overflow overflow = Overflow::Throw) {
  if (variant != Format::FP6_E3M2 && variant != Format::FP6_E2M3)
    throw std::invalid_argument("FP6 variant must be E3M2 or E2M3");
  return format_spec(variant).round(x, mode, rng, overflow);
}

/// Round-to-nearest-even onto IEEE binary16 (saturating at 65504).
inline double round_binary16(double x) {
  if (x == 0.0 || !std::isfinite(x)) return x;
  const double a = std::fabs(x);
  int e;
  std::frexp(a, &e);                  // a in [2^(e-1), 2^e)
  const int exp = std::max(e - 1, -14);
  const double quantum = std::ldexp(1.0, exp - 10);
  double r = std::nearbyint(a / quantum) * quantum;
  r = std::min(r, 65504.0);
  return std::copysign(r, x);
}

}  // namespace fp4sim
