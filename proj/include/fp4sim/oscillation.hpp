// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Weight-oscillation tracking and periodic reset to the quantization fixed
// point.
//
// Within an accumulation window each weight collects
//   dist_M += |w - w'|            (master-weight movement)
//   dist_Q += |Q(w) - Q(w')|      (quantized movement)
// and OsciRisk = dist_Q / dist_M. Elements whose risk reaches tau are reset
// to Q(w), which leaves the next forward pass unchanged.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp4sim/blockquant.hpp"
#include "fp4sim/matrix.hpp"

namespace fp4sim {

/// RTN-quantizes w using the scales already held by `live` (same shape),
/// without recomputing them. Matches dequantize(live) wherever w equals the
/// tensor `live` was built from.
inline Matrix quantize_with_scales(const Matrix& w, const QuantizedMatrix& live) {
  if (w.rows != live.rows || w.cols != live.cols)
    throw std::invalid_argument("quantize_with_scales: shape mismatch");
  const FormatSpec& elem = format_spec(live.element);
  const double pmax = elem.max_normal();
  Matrix out(w.rows, w.cols);
  for_each_scaled(live, [&](std::size_t i, double scale) {
    const double v = static_cast<double>(w.data[i]) / scale;
    const double a = std::min(std::fabs(v), pmax);
    const double p = elem.magnitudes()[elem.round_index(a, RoundingMode::Deterministic, nullptr)];
    out.data[i] = p == 0.0 ? 0.0f : static_cast<float>(std::copysign(p, v) * scale);
  });
  return out;
}

struct OscillationTracker {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> dist_m;
  std::vector<float> dist_q;
  std::vector<float> snapshot;
  std::uint64_t t0 = 0;
  bool active = false;  // a window has been opened

  OscillationTracker() = default;
  OscillationTracker(std::size_t r, std::size_t c)
      : rows(r), cols(c), dist_m(r * c, 0.0f), dist_q(r * c, 0.0f), snapshot(r * c, 0.0f) {}
};

/// One step of the tracker. t0 = 0 opens a window: accumulators are zeroed
/// and w is snapshotted. A window first seen at t0 > 0 is opened the same
/// way. Q uses the live scales for both w and the snapshot.
inline void update_oscillation_stats(const Matrix& w, const QuantizedMatrix& live, OscillationTracker& tr,
                                     std::uint64_t t0) {
  if (w.rows != tr.rows || w.cols != tr.cols)
    throw std::invalid_argument("update_oscillation_stats: tracker/parameter shape mismatch");
  if (t0 == 0 || !tr.active) {
    std::fill(tr.dist_m.begin(), tr.dist_m.end(), 0.0f);
    std::fill(tr.dist_q.begin(), tr.dist_q.end(), 0.0f);
    tr.snapshot = w.data;
    tr.t0 = t0;
    tr.active = true;
    return;
  }
  const Matrix prev(w.rows, w.cols, tr.snapshot);
  const Matrix qw = quantize_with_scales(w, live);
  const Matrix qp = quantize_with_scales(prev, live);
  for (std::size_t i = 0; i < w.size(); ++i) {
    tr.dist_m[i] += std::fabs(w.data[i] - tr.snapshot[i]);
    tr.dist_q[i] += std::fabs(qw.data[i] - qp.data[i]);
  }
  tr.snapshot = w.data;
  tr.t0 = t0;
}

/// dist_Q / dist_M per element; 0 where dist_M is 0.
inline std::vector<float> osci_risk(const OscillationTracker& tr) {
  std::vector<float> r(tr.dist_m.size(), 0.0f);
  for (std::size_t i = 0; i < r.size(); ++i)
    if (tr.dist_m[i] > 0.0f) r[i] = tr.dist_q[i] / tr.dist_m[i];
  return r;
}

/// Sets every element with risk >= tau to Q(w) under the live scales and
/// returns how many were reset. `live` should come from quantizing the
/// current w so Q(w) is its forward value.
inline std::size_t oscillation_suppress(Matrix& w, const OscillationTracker& tr, const QuantizedMatrix& live,
                                        double tau) {
  if (w.rows != tr.rows || w.cols != tr.cols)
    throw std::invalid_argument("oscillation_suppress: tracker/parameter shape mismatch");
  if (!tr.active) return 0;
  const auto risk = osci_risk(tr);
  const Matrix q = quantize_with_scales(w, live);
  std::size_t n = 0;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (risk[i] >= tau) {
      w.data[i] = q.data[i];
      ++n;
    }
  return n;
}

struct SuppressionSchedule {
  std::uint64_t t_max = 5000;
  std::uint64_t t_start = 3200;
  std::uint64_t t_period = 200;
  std::uint64_t t_accu = 50;
  double tau = 8.0;

  void validate() const {
    if (t_period == 0) throw std::invalid_argument("T_period must be positive");
    if (t_accu + 1 >= t_period) throw std::invalid_argument("T_accu + 1 must be below T_period");
    if (t_start > t_max) throw std::invalid_argument("T_start must not exceed T_max");
  }
};

struct HookAction {
  enum Kind : std::uint8_t { None, Accumulate, Suppress } kind = None;
  std::uint64_t t0 = 0;

  friend bool operator==(const HookAction&, const HookAction&) = default;
};

/// What the trainer does after the optimizer step at `step`.
inline HookAction suppression_hook(std::uint64_t step, const SuppressionSchedule& s) {
  s.validate();
  if (step < s.t_start) return {};
  const std::uint64_t phase = step % s.t_period;
  if (phase <= s.t_accu) return {HookAction::Accumulate, phase};
  if (phase == s.t_accu + 1) return {HookAction::Suppress, 0};
  return {};
}

/// One row of the per-window export.
struct OscillationWindow {
  std::uint64_t step = 0;
  std::string layer;
  std::size_t elements = 0;
  std::size_t above_tau = 0;
  std::size_t reset = 0;
  double max_risk = 0.0;
  double mean_risk = 0.0;
  std::vector<std::size_t> above;  // one count per export threshold
};

inline const std::vector<double>& oscillation_export_thresholds() {
  static const std::vector<double> t{1, 2, 4, 8, 16, 32};
  return t;
}

inline OscillationWindow summarize_window(std::uint64_t step, std::string layer, const OscillationTracker& tr,
                                          double tau, std::size_t reset) {
  OscillationWindow w;
  w.step = step;
  w.layer = std::move(layer);
  w.reset = reset;
  const auto risk = osci_risk(tr);
  w.elements = risk.size();
  const auto& thr = oscillation_export_thresholds();
  w.above.assign(thr.size(), 0);
  double sum = 0.0;
  for (float r : risk) {
    sum += r;
    w.max_risk = std::max(w.max_risk, static_cast<double>(r));
    if (r >= tau) ++w.above_tau;
    for (std::size_t k = 0; k < thr.size(); ++k)
      if (r > thr[k]) ++w.above[k];
  }
  w.mean_risk = risk.empty() ? 0.0 : sum / static_cast<double>(risk.size());
  return w;
}

inline constexpr const char* kOscillationSchema = "# fp4sim oscillation v1";

inline std::string threshold_column(double t) {
  std::ostringstream os;
  os << "gt_" << t;
  return os.str();
}

inline void write_oscillation_header(std::ostream& os) {
  os << kOscillationSchema << "\nstep,layer,elements,risk_ge_tau,reset,max_risk,mean_risk";
  for (double t : oscillation_export_thresholds()) os << ',' << threshold_column(t);
  os << '\n';
}

inline void write_oscillation_row(std::ostream& os, const OscillationWindow& w) {
  os << w.step << ',' << w.layer << ',' << w.elements << ',' << w.above_tau << ',' << w.reset << ','
     << std::setprecision(9) << w.max_risk << ',' << w.mean_risk;
  for (std::size_t c : w.above) os << ',' << c;
  os << '\n';
}

}  // namespace fp4sim
