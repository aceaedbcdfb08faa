// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// fp4sim: command-line front end for the quantizer, the bias bench, the
// trainer and the oscillation analysis. Every run writes config.json next
// to its outputs; CSV outputs start with a versioned schema comment.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fp4sim/blockquant.hpp"
#include "fp4sim/oscillation.hpp"
#include "fp4sim/qlinear.hpp"
#include "fp4sim/tensor_io.hpp"
#include "fp4sim/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fp4sim;

namespace {

constexpr const char* kBiasSchema = "# fp4sim bias v1";
constexpr const char* kOsciSummarySchema = "# fp4sim osci-summary v1";
constexpr const char* kOsciPairedSchema = "# fp4sim osci-paired v1";

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out = "fp4sim_out";
  std::string config;
};

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << '\n';
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

// --- quantize ---------------------------------------------------------------

struct QuantizeArgs {
  std::string input;
  std::string format = "E2M1";
  std::string orientation = "1x16";
  std::string outer = "1x128";
  bool stochastic = false;
  bool mxfp4 = false;
};

int run_quantize(const Globals& g, const QuantizeArgs& a) {
  const Matrix m = load_dense(a.input);
  QuantSpec spec;
  spec.orientation = parse_orientation(a.orientation);
  spec.outer = parse_outer(a.outer);
  spec.element = parse_format(upper(a.format));
  if (a.mxfp4) {
    spec.outer = OuterGranularity::None;
    spec.scale_format = Format::E8M0;
    spec.group = 32;
  }
  const std::uint64_t seed = g.seed.value_or(0);
  RngStream rng(seed, "cli-quantize");
  QuantStats stats;
  const auto mode = a.stochastic ? RoundingMode::Stochastic : RoundingMode::Deterministic;
  const QuantizedMatrix q = quantize(m, spec, mode, &rng, &stats);
  const Matrix back = dequantize(q);

  double se = 0.0, sig = 0.0, max_abs = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double e = static_cast<double>(back.data[i]) - m.data[i];
    se += e * e;
    sig += static_cast<double>(m.data[i]) * m.data[i];
    max_abs = std::max(max_abs, std::fabs(e));
  }
  json report{{"rows", m.rows},
              {"cols", m.cols},
              {"mse", m.size() ? se / static_cast<double>(m.size()) : 0.0},
              {"max_abs_error", max_abs},
              {"clamp_events", stats.clamp_events}};
  // Lossless reconstructions have no finite SQNR.
  report["sqnr_db"] = se > 0.0 && sig > 0.0 ? json(10.0 * std::log10(sig / se)) : json(nullptr);

  fs::create_directories(g.out);
  write_file_bytes((fs::path(g.out) / "quantized.tjt2").string(), encode_tjt2(q));
  write_json(fs::path(g.out) / "quantize_stats.json", report);
  write_json(fs::path(g.out) / "config.json",
             {{"command", "quantize"},
              {"input", a.input},
              {"seed", seed},
              {"element", std::string(to_string(spec.element))},
              {"scale_format", std::string(to_string(spec.scale_format))},
              {"group", spec.group},
              {"orientation", std::string(to_string(spec.orientation))},
              {"outer", std::string(to_string(spec.outer))},
              {"rounding", a.stochastic ? "stochastic" : "deterministic"}});
  std::cout << report.dump() << '\n';
  return 0;
}

// --- bench-bias -------------------------------------------------------------

struct BiasArgs {
  std::string shape = "8x32x16";
  std::size_t draws = 100000;
  std::string preset = "base";
  std::string sites = "all";
  bool deterministic = false;
  bool boundary = false;
  double k_sigma = 5.0;
};

int run_bench_bias(const Globals& g, const BiasArgs& a) {
  const auto dims = split(a.shape, 'x');
  if (dims.size() != 3) throw CLI::ValidationError("--shape", "expected NxDxC, got '" + a.shape + "'");
  const std::size_t n = std::stoul(dims[0]), d = std::stoul(dims[1]), c = std::stoul(dims[2]);
  const std::uint64_t seed = g.seed.value_or(0);

  LayerQuantConfig cfg = preset(a.preset);
  if (cfg.outlier) cfg.outlier.reset();  // no calibration data here
  if (a.sites != "all") {
    cfg.enabled.fill(false);
    if (a.sites != "none")
      for (const auto& s : split(a.sites, ',')) cfg.enabled[static_cast<std::size_t>(parse_site(s))] = true;
  }
  if (a.deterministic) cfg.stochastic_backward = false;

  Matrix x(n, d), w(c, d), dy(n, c);
  if (a.boundary) {
    // Every block max is 6 and the rest sit at 0.3 of a bin, so
    // round-to-nearest always lands on the lower code.
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < d; ++k) x(r, k) = (k % 16 == 0) ? 6.0f : 0.15f;
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < d; ++k) w(r, k) = (k % 16 == 0) ? 6.0f : 1.0f;
    for (float& v : dy.data) v = 1.0f;
  } else {
    RngStream rng(seed, "bench-bias");
    for (Matrix* m : {&x, &w, &dy})
      for (float& v : m->data) v = static_cast<float>(rng.normal());
  }

  const auto fwd = linear_forward(x, w, cfg, {seed, 0, 0});
  // The expectation target: binary32 products of the operands the forward
  // pass actually used.
  const auto exact = linear_backward(dy, fwd.cache, preset_fp32(), 0);
  std::vector<double> s_dx(exact.dx.size()), q_dx(exact.dx.size()), s_dw(exact.dw.size()), q_dw(exact.dw.size());
  for (std::size_t t = 0; t < a.draws; ++t) {
    LinearCache cache = fwd.cache;
    cache.key.step = t + 1;
    const auto gr = linear_backward(dy, cache, cfg, t + 1);
    for (std::size_t i = 0; i < s_dx.size(); ++i) {
      s_dx[i] += gr.dx.data[i];
      q_dx[i] += static_cast<double>(gr.dx.data[i]) * gr.dx.data[i];
    }
    for (std::size_t i = 0; i < s_dw.size(); ++i) {
      s_dw[i] += gr.dw.data[i];
      q_dw[i] += static_cast<double>(gr.dw.data[i]) * gr.dw.data[i];
    }
  }

  fs::create_directories(g.out);
  std::ofstream csv(fs::path(g.out) / "bias.csv");
  csv << kBiasSchema << "\ntensor,index,exact,mean,std_error,z\n" << std::setprecision(9);
  const double nd = static_cast<double>(a.draws);
  double worst = 0.0;
  std::size_t violations = 0;
  const auto scan = [&](const char* name, const std::vector<double>& s, const std::vector<double>& q,
                        const Matrix& target) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double mean = s[i] / nd;
      const double se = std::sqrt(std::max(0.0, q[i] / nd - mean * mean) / nd);
      const double dev = std::fabs(mean - target.data[i]);
      // Summation-order noise of the binary32 reference.
      const double floor = 1e-6 * (1.0 + std::fabs(target.data[i]));
      const double z = dev / (se + floor);
      if (dev > a.k_sigma * se + floor) ++violations;
      worst = std::max(worst, z);
      csv << name << ',' << i << ',' << target.data[i] << ',' << mean << ',' << se << ',' << z << '\n';
    }
  };
  scan("dx", s_dx, q_dx, exact.dx);
  scan("dw", s_dw, q_dw, exact.dw);

  json report{{"draws", a.draws},
              {"elements", exact.dx.size() + exact.dw.size()},
              {"max_standardized_deviation", worst},
              {"k_sigma", a.k_sigma},
              {"violations", violations},
              {"pass", violations == 0}};
  write_json(fs::path(g.out) / "bias.json", report);
  json sites = json::array();
  for (Site s : kAllSites)
    if (cfg.on(s)) sites.push_back(std::string(to_string(s)));
  write_json(fs::path(g.out) / "config.json",
             {{"command", "bench-bias"},
              {"seed", seed},
              {"shape", {n, d, c}},
              {"draws", a.draws},
              {"quant", detail::quant_to_json(cfg)},
              {"sites", sites},
              {"input", a.boundary ? "boundary" : "normal"}});
  std::cout << report.dump() << '\n';
  return violations == 0 ? 0 : 1;
}

// --- training subcommands ---------------------------------------------------

struct TrainArgs {
  std::string preset;
  std::string model;
  std::optional<std::uint64_t> steps;
};

TrainRunConfig resolve_config(const Globals& g, const TrainArgs& a) {
  TrainRunConfig c = default_transformer_run();
  if (!g.config.empty()) {
    c = load_config(g.config);
  } else if (a.model == "mlp") {
    c = default_mlp_run();
  }
  if (!a.model.empty() && a.model != std::string(to_string(c.model)))
    throw std::invalid_argument("--model " + a.model + " conflicts with the config file");
  if (g.seed) c.seed = *g.seed;
  if (!a.preset.empty()) {
    c.preset = a.preset;
    c.quant = preset(a.preset);
  }
  if (a.steps) {
    // Shrinks or stretches the run with the suppression horizon kept in step.
    c.schedule.total_steps = *a.steps;
    c.suppression.t_max = *a.steps;
  }
  c.out_dir = g.out;
  c.validate();
  return c;
}

void print_summary(const RunReport& r) {
  std::cout << std::setprecision(6) << "final_train_loss " << r.final_train_loss();
  if (const auto v = r.final_val_loss()) std::cout << " final_val_loss " << *v;
  std::cout << '\n';
}

int run_train(const Globals& g, const TrainArgs& a) {
  const RunReport r = train(resolve_config(g, a));
  print_summary(r);
  return 0;
}

int run_switch(const Globals& g, const TrainArgs& a, std::uint64_t at, const std::string& mode) {
  const TrainRunConfig c = resolve_config(g, a);
  const RunReport r = precision_switch_run(c, at, parse_precision_mode(lower(mode)));
  print_summary(r);
  return 0;
}

SweepSubset parse_subset(const std::string& text) {
  SweepSubset s;
  s.id = text;
  if (text == "none") return s;
  if (text == "all") {
    s.sites.assign(kAllSites.begin(), kAllSites.end());
    return s;
  }
  bool any_site = false;
  for (const auto& tok : split(text, '+')) {
    if (tok.rfind("fp32:", 0) == 0) {
      s.fp32_modules.push_back(tok.substr(5));
    } else {
      s.sites.push_back(parse_site(tok));
      any_site = true;
    }
  }
  // Only module exclusions given: every site stays on elsewhere.
  if (!any_site) s.sites.assign(kAllSites.begin(), kAllSites.end());
  return s;
}

int run_sweep(const Globals& g, const TrainArgs& a, const std::vector<std::string>& subset_specs,
              std::size_t jobs) {
  const TrainRunConfig c = resolve_config(g, a);
  std::vector<SweepSubset> subsets;
  if (subset_specs.empty()) {
    for (Site s : kAllSites) subsets.push_back({std::string(to_string(s)), {s}, {}});
    subsets.push_back(parse_subset("all"));
  } else {
    for (const auto& s : subset_specs) subsets.push_back(parse_subset(s));
  }
  const auto rows = loss_decomposition_sweep(c, subsets, jobs);
  fs::create_directories(g.out);
  {
    std::ofstream os(fs::path(g.out) / "sweep.csv");
    write_sweep(os, rows);
  }
  json snap = to_json(c);
  json ids = json::array();
  for (const auto& s : subsets) ids.push_back(s.id);
  snap["sweep"] = {{"subsets", ids}, {"reference", "bypass"}};
  write_json(fs::path(g.out) / "config.json", snap);
  write_sweep(std::cout, rows);
  return 0;
}

// --- osci-analyze -----------------------------------------------------------

struct WindowTotals {
  std::size_t elements = 0;
  std::vector<std::size_t> above;
};

/// Per-step totals over layers, keyed by step.
std::map<std::uint64_t, WindowTotals> read_oscillation(const std::string& path, const std::vector<double>& thr,
                                                       std::vector<std::size_t>& cols) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kOscillationSchema)
    throw std::runtime_error(path + ": schema mismatch, expected '" + std::string(kOscillationSchema) + "'");
  if (!std::getline(in, line)) throw std::runtime_error(path + ": missing header");
  const auto header = split(line, ',');
  const auto col_of = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error(path + ": schema mismatch, no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_step = col_of("step"), c_elems = col_of("elements");
  cols.clear();
  for (double t : thr) cols.push_back(col_of(threshold_column(t)));

  std::map<std::uint64_t, WindowTotals> out;
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != header.size())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                               " fields");
    WindowTotals& w = out[std::stoull(f[c_step])];
    w.above.resize(thr.size(), 0);
    w.elements += std::stoull(f[c_elems]);
    for (std::size_t k = 0; k < thr.size(); ++k) w.above[k] += std::stoull(f[cols[k]]);
  }
  return out;
}

double fraction(const WindowTotals& w, std::size_t k) {
  return w.elements ? static_cast<double>(w.above[k]) / static_cast<double>(w.elements) : 0.0;
}

int run_osci_analyze(const Globals& g, const std::string& input, const std::string& paired,
                     const std::vector<double>& thr) {
  std::vector<std::size_t> cols;
  const auto with = read_oscillation(input, thr, cols);
  fs::create_directories(g.out);
  json summary{{"windows", with.size()}};

  {
    std::ofstream os(fs::path(g.out) / "osci_summary.csv");
    os << kOsciSummarySchema << "\nstep,elements";
    for (double t : thr) os << ",frac_" << threshold_column(t);
    os << '\n' << std::setprecision(9);
    std::vector<double> mean(thr.size(), 0.0);
    for (const auto& [step, w] : with) {
      os << step << ',' << w.elements;
      for (std::size_t k = 0; k < thr.size(); ++k) {
        os << ',' << fraction(w, k);
        mean[k] += fraction(w, k);
      }
      os << '\n';
    }
    json m = json::object();
    for (std::size_t k = 0; k < thr.size(); ++k)
      m[threshold_column(thr[k])] = with.empty() ? 0.0 : mean[k] / static_cast<double>(with.size());
    summary["mean_fraction"] = m;
  }

  if (!paired.empty()) {
    const auto without = read_oscillation(paired, thr, cols);
    std::ofstream os(fs::path(g.out) / "osci_paired.csv");
    os << kOsciPairedSchema << "\nstep";
    for (double t : thr) {
      const auto c = threshold_column(t);
      os << ",with_" << c << ",without_" << c << ",delta_" << c;
    }
    os << '\n' << std::setprecision(9);
    std::vector<std::size_t> negative(thr.size(), 0);
    std::size_t shared = 0;
    for (const auto& [step, w] : with) {
      const auto it = without.find(step);
      if (it == without.end()) continue;
      ++shared;
      os << step;
      for (std::size_t k = 0; k < thr.size(); ++k) {
        const double d = fraction(w, k) - fraction(it->second, k);
        if (d < 0.0) ++negative[k];
        os << ',' << fraction(w, k) << ',' << fraction(it->second, k) << ',' << d;
      }
      os << '\n';
    }
    json neg = json::object();
    for (std::size_t k = 0; k < thr.size(); ++k) neg[threshold_column(thr[k])] = negative[k];
    summary["paired_windows"] = shared;
    summary["windows_with_lower_fraction"] = neg;
  }

  write_json(fs::path(g.out) / "osci_summary.json", summary);
  write_json(fs::path(g.out) / "config.json",
             {{"command", "osci-analyze"}, {"input", input}, {"paired", paired}, {"thresholds", thr}});
  std::cout << summary.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fp4sim: NVFP4 fully-quantized training simulator"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--config", g.config, "Training config JSON (train, sweep, switch)")->check(CLI::ExistingFile);

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "Quantize a dense matrix and report the error");
  quant->add_option("input", qa.input, "TJT2 or CSV matrix")->required()->check(CLI::ExistingFile);
  quant->add_option("--format", qa.format, "Element format: E2M1, FP6_E3M2, FP6_E2M3")->capture_default_str();
  quant->add_option("--orientation", qa.orientation, "Group shape: 1x16, 16x1, 16x16")->capture_default_str();
  quant->add_option("--outer", qa.outer, "Outer scale: 1x128, row, tensor, none")->capture_default_str();
  quant->add_flag("--stochastic", qa.stochastic, "Stochastic rounding instead of round-to-nearest");
  quant->add_flag("--mxfp4", qa.mxfp4, "E8M0 scales over groups of 32, no outer scale");
  quant->footer("Example: fp4sim --out q quantize weights.csv --outer tensor");

  BiasArgs ba;
  auto* bias = app.add_subcommand("bench-bias", "Monte-Carlo bias check of the backward pass");
  bias->add_option("--shape", ba.shape, "Batch x in-features x out-features")->capture_default_str();
  bias->add_option("--draws", ba.draws, "Number of backward draws")->check(CLI::Range(10000UL, 100000000UL))
      ->capture_default_str();
  bias->add_option("--preset", ba.preset, "fp32, base, full, nvidia_recipe")->capture_default_str();
  bias->add_option("--sites", ba.sites, "Comma-separated sites to keep on, or all / none")->capture_default_str();
  bias->add_flag("--deterministic", ba.deterministic, "Round-to-nearest in the backward pass");
  bias->add_flag("--boundary", ba.boundary, "Input parked between two codes instead of Gaussian");
  bias->add_option("--k-sigma", ba.k_sigma, "Failure threshold in standard errors")->capture_default_str();
  bias->footer("Example: fp4sim --seed 1 --out bias bench-bias --shape 8x32x16 --draws 100000");

  TrainArgs ta;
  const auto add_train_opts = [&](CLI::App* sub) {
    sub->add_option("--preset", ta.preset, "fp32, base, full, nvidia_recipe");
    sub->add_option("--model", ta.model, "mlp or tiny_transformer (without --config)");
    sub->add_option("--steps", ta.steps, "Override the number of training steps");
  };
  auto* trn = app.add_subcommand("train", "Train one model and write metrics");
  add_train_opts(trn);
  trn->footer("Example: fp4sim --seed 3 --out runs/full train --preset full");

  std::vector<std::string> subset_specs;
  std::size_t jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Loss decomposition over quantizer subsets");
  add_train_opts(sweep);
  sweep->add_option("--subset", subset_specs,
                    "Sites joined by '+', 'fp32:<module>' to keep a module in binary32, or all / none; "
                    "repeatable (default: each site alone, then all)");
  sweep->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  sweep->footer("Example: fp4sim --out sweep sweep --model mlp --subset fwd.x --subset dx.dy+dw.dy --jobs 4");

  std::string osci_in, osci_paired;
  std::vector<double> thresholds{1, 2, 4, 8, 16, 32};
  auto* osci = app.add_subcommand("osci-analyze", "Oscillating fractions per window from oscillation.csv");
  osci->add_option("input", osci_in, "oscillation.csv of a run")->required()->check(CLI::ExistingFile);
  osci->add_option("--paired", osci_paired, "oscillation.csv of the run without resets")->check(CLI::ExistingFile);
  osci->add_option("--thresholds", thresholds, "Risk thresholds, from the exported set")->delimiter(',')
      ->capture_default_str();
  osci->footer("Example: fp4sim --out osci osci-analyze runs/full/oscillation.csv --paired runs/noreset/oscillation.csv");

  std::uint64_t switch_at = 4000;
  std::string switch_mode = "fp6xfp4";
  auto* sw = app.add_subcommand("switch", "Train, then continue in a higher precision mode");
  add_train_opts(sw);
  sw->add_option("--at", switch_at, "Last step in the original precision")->capture_default_str();
  sw->add_option("--mode", switch_mode, "fp6xfp4 or fp6xfp6")->capture_default_str();
  sw->footer("Example: fp4sim --out runs/switch switch --at 4000 --mode fp6xfp4");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*quant) return run_quantize(g, qa);
    if (*bias) return run_bench_bias(g, ba);
    if (*trn) return run_train(g, ta);
    if (*sweep) return run_sweep(g, ta, subset_specs, jobs);
    if (*osci) return run_osci_analyze(g, osci_in, osci_paired, thresholds);
    if (*sw) return run_switch(g, ta, switch_at, switch_mode);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
