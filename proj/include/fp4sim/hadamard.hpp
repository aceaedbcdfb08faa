// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Block Hadamard matrices and the random Hadamard transform (RHT) applied
// along the contraction axis of the backward matmuls.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp4sim/matrix.hpp"
#include "fp4sim/rng.hpp"

namespace fp4sim {

inline constexpr std::size_t kDefaultHadamardBlock = 32;

/// Normalised Sylvester Hadamard matrix of order d, entries +-1/sqrt(d).
inline Matrix hadamard_dense(std::size_t d) {
  if (d < 2 || !std::has_single_bit(d))
    throw std::invalid_argument("hadamard_dense: d must be a power of two >= 2, got " + std::to_string(d));
  std::vector<int> h{1};
  for (std::size_t n = 1; n < d; n *= 2) {
    std::vector<int> next(4 * n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const int v = h[i * n + j];
        next[i * 2 * n + j] = v;
        next[i * 2 * n + j + n] = v;
        next[(i + n) * 2 * n + j] = v;
        next[(i + n) * 2 * n + j + n] = -v;
      }
    h = std::move(next);
  }
  const float s = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
  Matrix out(d, d);
  for (std::size_t i = 0; i < d * d; ++i) out.data[i] = static_cast<float>(h[i]) * s;
  return out;
}

/// Which backward matmul a sign vector belongs to.
enum class RhtSide : std::uint8_t { GradInput = 0, GradWeight = 1, Forward = 2 };

/// Sign vector and block size for one RHT over a contraction length `dim`.
/// The transform works on `padded()` = dim rounded up to a multiple of
/// `block`; signs over the padding are +1.
struct RhtContext {
  std::size_t dim = 0;
  std::size_t block = kDefaultHadamardBlock;
  std::vector<std::int8_t> signs;
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
  RhtSide side = RhtSide::GradInput;

  std::size_t padded() const noexcept { return signs.size(); }
};

inline std::size_t rht_padded_dim(std::size_t dim, std::size_t block) {
  return ((dim + block - 1) / block) * block;
}

/// Signs are a pure function of (seed, layer, step, side), so both operands
/// of a matmul and any replay see the same vector.
inline RhtContext make_rht_context(std::size_t dim, std::uint64_t seed, std::uint64_t layer, std::uint64_t step,
                                   RhtSide side, std::size_t block = kDefaultHadamardBlock) {
  if (block < 2 || !std::has_single_bit(block))
    throw std::invalid_argument("RHT block must be a power of two >= 2");
  if (dim == 0) throw std::invalid_argument("RHT dim must be positive");
  RhtContext ctx;
  ctx.dim = dim;
  ctx.block = block;
  ctx.seed = seed;
  ctx.layer = layer;
  ctx.step = step;
  ctx.side = side;
  ctx.signs.assign(rht_padded_dim(dim, block), 1);
  RngStream rng(derive_key({seed, label_hash("rht"), layer, step, static_cast<std::uint64_t>(side)}));
  for (std::size_t i = 0; i < dim; ++i) ctx.signs[i] = static_cast<std::int8_t>(rng.sign());
  return ctx;
}

/// In-place normalised fast Walsh-Hadamard transform of one block.
inline void fwht_block(float* x, std::size_t d) {
  for (std::size_t h = 1; h < d; h *= 2)
    for (std::size_t i = 0; i < d; i += 2 * h)
      for (std::size_t j = i; j < i + h; ++j) {
        const float a = x[j], b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
  const float s = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t j = 0; j < d; ++j) x[j] *= s;
}

/// A * diag(signs) * blockdiag(H_d, ...), zero-padding A's columns to
/// ctx.padded(). The result keeps the padded width: cropping it would break
/// (A S H)(B S H)^T = A B^T.
inline Matrix rht_apply(const Matrix& a, const RhtContext& ctx) {
  if (a.cols != ctx.dim)
    throw std::invalid_argument("rht_apply: a.cols " + std::to_string(a.cols) + " != ctx.dim " +
                                std::to_string(ctx.dim));
  const std::size_t n = ctx.padded();
  Matrix out(a.rows, n);
  for (std::size_t r = 0; r < a.rows; ++r) {
    float* dst = out.data.data() + r * n;
    const float* src = a.data.data() + r * a.cols;
    for (std::size_t c = 0; c < a.cols; ++c) dst[c] = ctx.signs[c] < 0 ? -src[c] : src[c];
    for (std::size_t b = 0; b < n; b += ctx.block) fwht_block(dst + b, ctx.block);
  }
  return out;
}

/// Inverse of rht_apply: B * blockdiag(H) * diag(signs), cropped back to
/// ctx.dim columns.
inline Matrix rht_invert(const Matrix& b, const RhtContext& ctx) {
  if (b.cols != ctx.padded()) throw std::invalid_argument("rht_invert: b.cols != ctx.padded()");
  Matrix out(b.rows, ctx.dim);
  std::vector<float> tmp(b.cols);
  for (std::size_t r = 0; r < b.rows; ++r) {
    std::copy_n(b.data.data() + r * b.cols, b.cols, tmp.data());
    for (std::size_t k = 0; k < b.cols; k += ctx.block) fwht_block(tmp.data() + k, ctx.block);
    for (std::size_t c = 0; c < ctx.dim; ++c) out(r, c) = ctx.signs[c] < 0 ? -tmp[c] : tmp[c];
  }
  return out;
}

/// max |A B^T - (A S H)(B S H)^T| in binary64, a diagnostic for the
/// transform's orthogonality.
inline double rht_pair_identity_check(const Matrix& a, const Matrix& b, const RhtContext& ctx) {
  if (a.cols != ctx.dim || b.cols != ctx.dim)
    throw std::invalid_argument("rht_pair_identity_check: dimension mismatch");
  const Matrix at = rht_apply(a, ctx), bt = rht_apply(b, ctx);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double ref = 0.0, rot = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) ref += static_cast<double>(a(i, k)) * b(j, k);
      for (std::size_t k = 0; k < at.cols; ++k) rot += static_cast<double>(at(i, k)) * bt(j, k);
      worst = std::max(worst, std::fabs(ref - rot));
    }
  return worst;
}

}  // namespace fp4sim
