// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Quantizes a Gaussian matrix with one outlier under each outer-scale
// granularity and prints the reconstruction error.

#include <cstdio>

#include "fp4sim/blockquant.hpp"

int main() {
  using namespace fp4sim;
  RngStream rng(1, "sample");
  Matrix m(64, 512);
  for (float& v : m.data) v = static_cast<float>(rng.normal());
  m(3, 100) = 500.0f;

  for (auto g : {OuterGranularity::Block_1x128, OuterGranularity::PerRow, OuterGranularity::PerTensor}) {
    QuantStats stats;
    QuantSpec spec;
    spec.outer = g;
    const QuantizedMatrix q = quantize(m, spec, RoundingMode::Deterministic, nullptr, &stats);
    std::printf("%-12s mse %.6f  clamps %zu\n", std::string(to_string(g)).c_str(), mse(dequantize(q), m),
                stats.clamp_events);
  }
}
