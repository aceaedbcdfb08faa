// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the fp4sim binary end to end through std::system.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "fp4sim/tensor_io.hpp"
#include "fp4sim/trainer.hpp"

using namespace fp4sim;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("fp4sim_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs `fp4sim <args>` with stdout and stderr captured; returns the exit code.
  int run(const std::string& args) {
    const std::string cmd = std::string(FP4SIM_CLI_PATH) + " " + args + " > " + (dir_ / "stdout").string() + " 2> " +
                            (dir_ / "stderr").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string read(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  std::string out() const { return read(dir_ / "stdout"); }
  std::string err() const { return read(dir_ / "stderr"); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

Matrix outlier_matrix() {
  RngStream rng(5, "cli-outlier");
  Matrix m(16, 256);
  for (float& v : m.data) v = static_cast<float>(rng.normal());
  for (std::size_t r = 0; r < m.rows; ++r) m(r, 3) *= 200.0f;
  return m;
}

TrainRunConfig small_run() {
  TrainRunConfig c = default_mlp_run();
  c.mlp.widths = {784, 32, 10};
  c.batch_size = 16;
  c.regression.val_rows = 64;
  c.schedule = {2, 12, 0.0};
  c.suppression = {12, 6, 4, 1, 8.0};
  c.preset = "base";
  c.quant = preset_base();
  return c;
}

void write_text(const std::string& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

}  // namespace

TEST_F(Cli, EverySubcommandHelpHasAnExample) {
  for (const char* sub : {"quantize", "bench-bias", "train", "sweep", "osci-analyze", "switch"}) {
    EXPECT_EQ(run(std::string(sub) + " --help"), 0) << sub;
    EXPECT_NE(out().find("Example: fp4sim"), std::string::npos) << sub;
  }
}

TEST_F(Cli, QuantizeRepresentableMatrixIsLossless) {
  // E2M1 values times 1.75 with a 10.5 per group are fixed points.
  Matrix m(4, 32);
  const float vals[] = {0.0f, 0.5f, 1.0f, 1.5f, 2.0f, 3.0f, 4.0f, 6.0f};
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = 1.75f * (i % 16 == 0 ? 6.0f : vals[(i * 7) % 8]);
  write_file_bytes(path("m.tjt2"), encode_tjt2(m));
  ASSERT_EQ(run("--out " + path("q") + " quantize " + path("m.tjt2")), 0) << err();
  const json stats = json::parse(read(dir_ / "q" / "quantize_stats.json"));
  EXPECT_EQ(stats["mse"].get<double>(), 0.0);
  EXPECT_EQ(stats["max_abs_error"].get<double>(), 0.0);
  EXPECT_TRUE(stats["sqnr_db"].is_null());
  EXPECT_TRUE(fs::exists(dir_ / "q" / "config.json"));
}

TEST_F(Cli, QuantizeIsByteIdenticalAcrossRuns) {
  write_text(path("m.csv"), to_csv(outlier_matrix()));
  for (const char* flags : {"", " --stochastic"}) {
    ASSERT_EQ(run("--seed 4 --out " + path("a") + " quantize " + path("m.csv") + flags), 0) << err();
    ASSERT_EQ(run("--seed 4 --out " + path("b") + " quantize " + path("m.csv") + flags), 0) << err();
    for (const char* f : {"quantized.tjt2", "quantize_stats.json", "config.json"})
      EXPECT_EQ(read(dir_ / "a" / f), read(dir_ / "b" / f)) << f << flags;
  }
}

TEST_F(Cli, QuantizeReportMatchesDumpAndOuterOrdering) {
  const Matrix m = outlier_matrix();
  write_text(path("m.csv"), to_csv(m));
  double mse[2];
  const char* outers[] = {"1x128", "tensor"};
  for (int k = 0; k < 2; ++k) {
    const std::string o = path(outers[k]);
    ASSERT_EQ(run("--out " + o + " quantize " + path("m.csv") + " --outer " + outers[k]), 0) << err();
    mse[k] = json::parse(read(fs::path(o) / "quantize_stats.json"))["mse"].get<double>();
    // Recompute from the dump itself.
    const auto t = decode_tjt2(read_file_bytes(o + "/quantized.tjt2"));
    const Matrix back = dequantize(std::get<QuantizedMatrix>(t));
    const Matrix src = from_csv(read(path("m.csv")));
    double se = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) se += std::pow(static_cast<double>(back.data[i]) - src.data[i], 2);
    EXPECT_NEAR(mse[k], se / static_cast<double>(src.size()), 1e-12 * (1.0 + mse[k]));
  }
  // The outlier column inflates one shared scale; 1x128 blocks confine it.
  EXPECT_LT(mse[0], mse[1]);
}

TEST_F(Cli, MalformedInputReportsByteOffset) {
  write_text(path("bad.csv"), "1,2\n3,x\n");
  EXPECT_EQ(run("--out " + path("q") + " quantize " + path("bad.csv")), 2);
  EXPECT_NE(err().find("at byte 6"), std::string::npos) << err();
  write_text(path("bad.tjt2"), "TJT2\x07");
  EXPECT_EQ(run("--out " + path("q") + " quantize " + path("bad.tjt2")), 2);
  EXPECT_NE(err().find("at byte"), std::string::npos) << err();
}

TEST_F(Cli, BenchBiasExitCodes) {
  ASSERT_EQ(run("--out " + path("off") + " bench-bias --sites none --draws 10000"), 0) << err();
  EXPECT_EQ(json::parse(out())["max_standardized_deviation"].get<double>(), 0.0);

  EXPECT_EQ(run("--seed 2 --out " + path("base") + " bench-bias --shape 8x32x16 --draws 100000"), 0) << out();
  const json base = json::parse(read(dir_ / "base" / "bias.json"));
  EXPECT_LE(base["max_standardized_deviation"].get<double>(), 5.0);
  EXPECT_EQ(read(dir_ / "base" / "bias.csv").rfind("# fp4sim bias v1\ntensor,index,exact,mean,std_error,z\n", 0), 0u);

  EXPECT_EQ(run("--out " + path("det") + " bench-bias --draws 10000 --boundary --deterministic"), 1) << out();
  EXPECT_GT(json::parse(out())["violations"].get<std::size_t>(), 0u);

  EXPECT_NE(run("bench-bias --draws 100"), 0);
}

TEST_F(Cli, OsciAnalyzeCountsAndPairs) {
  const std::string header = std::string(kOscillationSchema) +
                             "\nstep,layer,elements,risk_ge_tau,reset,max_risk,mean_risk,gt_1,gt_2,gt_4,gt_8,gt_16,gt_32\n";
  write_text(path("zero.csv"), header + "26,fc1,100,0,0,0,0,0,0,0,0,0,0\n126,fc1,100,0,0,0,0,0,0,0,0,0,0\n");
  ASSERT_EQ(run("--out " + path("z") + " osci-analyze " + path("zero.csv")), 0) << err();
  for (auto& [k, v] : json::parse(out())["mean_fraction"].items()) EXPECT_EQ(v.get<double>(), 0.0) << k;

  // Half of 200 elements at risk 32: above 16, not above 32.
  write_text(path("half.csv"), header + "26,fc1,120,100,0,32,16,100,100,100,100,100,0\n"
                                        "26,fc2,80,0,0,0,0,0,0,0,0,0,0\n");
  ASSERT_EQ(run("--out " + path("h") + " osci-analyze " + path("half.csv") + " --thresholds 16,32"), 0) << err();
  const json h = json::parse(out());
  EXPECT_EQ(h["mean_fraction"]["gt_16"].get<double>(), 0.5);
  EXPECT_EQ(h["mean_fraction"]["gt_32"].get<double>(), 0.0);
  EXPECT_EQ(read(dir_ / "h" / "osci_summary.csv"),
            "# fp4sim osci-summary v1\nstep,elements,frac_gt_16,frac_gt_32\n26,200,0.5,0\n");

  ASSERT_EQ(run("--out " + path("p") + " osci-analyze " + path("zero.csv") + " --paired " + path("half.csv") +
                " --thresholds 16"),
            0)
      << err();
  const json p = json::parse(out());
  EXPECT_EQ(p["paired_windows"].get<int>(), 1);
  EXPECT_EQ(p["windows_with_lower_fraction"]["gt_16"].get<int>(), 1);
  EXPECT_EQ(read(dir_ / "p" / "osci_paired.csv"),
            "# fp4sim osci-paired v1\nstep,with_gt_16,without_gt_16,delta_gt_16\n26,0,0.5,-0.5\n");

  write_text(path("old.csv"), "# fp4sim oscillation v0\nstep\n");
  EXPECT_EQ(run("--out " + path("o") + " osci-analyze " + path("old.csv")), 2);
  EXPECT_NE(err().find("schema mismatch"), std::string::npos);
  EXPECT_EQ(run("--out " + path("o") + " osci-analyze " + path("zero.csv") + " --thresholds 3"), 2);
  EXPECT_NE(err().find("gt_3"), std::string::npos);
}

TEST_F(Cli, TrainIsDeterministicAndSnapshotsConfig) {
  write_text(path("run.json"), to_json(small_run()).dump(2));
  for (const char* o : {"r1", "r2"})
    ASSERT_EQ(run("--seed 9 --config " + path("run.json") + " --out " + path(o) + " train"), 0) << err();
  for (const char* f : {"metrics.csv", "oscillation.csv"}) EXPECT_EQ(read(dir_ / "r1" / f), read(dir_ / "r2" / f)) << f;
  json snap = json::parse(read(dir_ / "r1" / "config.json")), snap2 = json::parse(read(dir_ / "r2" / "config.json"));
  EXPECT_EQ(snap["out"], path("r1"));
  snap.erase("out");
  snap2.erase("out");
  EXPECT_EQ(snap, snap2);
  EXPECT_EQ(snap["seed"].get<std::uint64_t>(), 9u);
  EXPECT_EQ(config_from_json(snap).seed, 9u);
  EXPECT_EQ(read(dir_ / "r1" / "metrics.csv").rfind(std::string(kMetricsSchema) + "\n", 0), 0u);

  // The run the snapshot describes is the run that was made.
  TrainRunConfig again = config_from_json(snap);
  again.out_dir = path("r3");
  train(again);
  EXPECT_EQ(read(dir_ / "r1" / "metrics.csv"), read(dir_ / "r3" / "metrics.csv"));
}

TEST_F(Cli, SweepWritesOneRowPerSubset) {
  write_text(path("run.json"), to_json(small_run()).dump(2));
  ASSERT_EQ(run("--config " + path("run.json") + " --out " + path("s") +
                " sweep --subset none --subset fwd.x+fwd.w --subset fp32:fc1 --jobs 2"),
            0)
      << err();
  const std::string csv = read(dir_ / "s" / "sweep.csv");
  EXPECT_EQ(csv.rfind("# fp4sim sweep v1\nsubset,final_train_loss,final_val_loss,delta_train,delta_val\nnone,", 0), 0u);
  EXPECT_NE(csv.find("\nfwd.x+fwd.w,"), std::string::npos);
  EXPECT_NE(csv.find("\nfp32:fc1,"), std::string::npos);
  for (const char* id : {"bypass", "none", "fwd.x+fwd.w", "fp32:fc1"})
    EXPECT_TRUE(fs::exists(dir_ / "s" / id / "metrics.csv")) << id;
  EXPECT_TRUE(fs::exists(dir_ / "s" / "config.json"));
}

TEST_F(Cli, SwitchRecordsTheModeChange) {
  write_text(path("run.json"), to_json(small_run()).dump(2));
  ASSERT_EQ(run("--config " + path("run.json") + " --out " + path("w") + " switch --at 8 --mode FP6xFP6"), 0) << err();
  const json snap = json::parse(read(dir_ / "w" / "config.json"));
  EXPECT_EQ(snap["precision_switch"]["after_step"].get<int>(), 8);
  EXPECT_EQ(snap["precision_switch"]["mode"].get<std::string>(), "fp6xfp6");
  EXPECT_NE(run("--config " + path("run.json") + " --out " + path("x") + " switch --at 99"), 0);
}
