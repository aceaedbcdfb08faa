// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// AdamW over binary32 master weights and a cosine schedule with linear
// warmup.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp4sim/matrix.hpp"

namespace fp4sim {

/// A trainable tensor: master weights, gradient accumulator and AdamW moments.
struct Param {
  std::string name;
  Matrix w;
  Matrix grad;
  Matrix m;
  Matrix v;
  bool decay = true;  // norms, biases and embeddings opt out

  Param() = default;
  Param(std::string n, Matrix init, bool wd = true)
      : name(std::move(n)), w(std::move(init)), grad(w.rows, w.cols), m(w.rows, w.cols), v(w.rows, w.cols),
        decay(wd) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

struct AdamWConfig {
  double lr = 3e-3;  // peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct CosineSchedule {
  std::uint64_t warmup_steps = 100;
  std::uint64_t total_steps = 5000;
  double floor = 0.0;  // fraction of peak reached at total_steps

  /// 0 at step 0, peak at warmup_steps, cosine down to floor*peak at
  /// total_steps and held there afterwards.
  double lr(std::uint64_t step, double peak) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return peak * floor;
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double progress = span > 0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
    return peak * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
  }

  void validate() const {
    if (total_steps == 0) throw std::invalid_argument("schedule: total_steps must be positive");
    if (warmup_steps > total_steps) throw std::invalid_argument("schedule: warmup longer than training");
    if (floor < 0.0 || floor > 1.0) throw std::invalid_argument("schedule: floor outside [0, 1]");
  }
};

/// One decoupled-weight-decay Adam update. `t` counts updates from 1.
inline void adamw_step(Param& p, const AdamWConfig& c, double lr, std::uint64_t t) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  const double wd = p.decay ? c.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.w.size(); ++i) {
    const double g = p.grad.data[i];
    const double m = c.beta1 * p.m.data[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * p.v.data[i] + (1.0 - c.beta2) * g * g;
    p.m.data[i] = static_cast<float>(m);
    p.v.data[i] = static_cast<float>(v);
    const double w = p.w.data[i];
    const double upd = (m / bc1) / (std::sqrt(v / bc2) + c.eps) + wd * w;
    p.w.data[i] = static_cast<float>(w - lr * upd);
  }
}

}  // namespace fp4sim
