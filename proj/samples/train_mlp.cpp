// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Trains the planted-outlier regression MLP in binary32 and with the full
// FP4 recipe, then prints both final validation losses.

#include <cstdio>

#include "fp4sim/trainer.hpp"

int main() {
  using namespace fp4sim;
  for (const char* name : {"fp32", "full"}) {
    TrainRunConfig c = default_mlp_run();
    c.preset = name;
    c.quant = preset(name);
    const RunReport r = train(c);
    std::printf("%-5s final val %.5f  train %.5f\n", name, r.final_val_loss().value(), r.final_train_loss());
  }
}
