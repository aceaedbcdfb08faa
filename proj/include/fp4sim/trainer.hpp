// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Training loop over binary32 master weights with quantized linear layers,
// AdamW, a cosine schedule and the periodic oscillation reset.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fp4sim/data.hpp"
#include "fp4sim/models.hpp"
#include "fp4sim/optim.hpp"
#include "fp4sim/oscillation.hpp"
#include "fp4sim/qlinear.hpp"

namespace fp4sim {

enum class ModelKind : std::uint8_t { Mlp, TinyTransformer };
enum class TaskKind : std::uint8_t { SyntheticRegression, CharLM };

struct TrainRunConfig {
  ModelKind model = ModelKind::TinyTransformer;
  MlpConfig mlp;
  TransformerConfig transformer;
  TaskKind task = TaskKind::CharLM;
  RegressionConfig regression;
  CharLmConfig charlm;
  AdamWConfig optimizer;
  CosineSchedule schedule;
  std::size_t batch_size = 1;  // samples (MLP) or sequences (transformer) per step
  std::uint64_t seed = 0;
  std::string preset = "full";
  LayerQuantConfig quant = preset_full();
  std::vector<std::string> fp32_modules;  // linear layers whose name contains one of these stay unquantized
  SuppressionSchedule suppression;
  bool osci_reset = true;
  double osci_measure_threshold = 16.0;  // reported, never acted on
  std::uint64_t calibration_step = 100;  // outlier channels are chosen after this many steps
  std::size_t calibration_batches = 4;
  std::uint64_t val_every = 0;  // 0: every T_period steps
  std::string out_dir;

  std::uint64_t total_steps() const { return schedule.total_steps; }
  std::uint64_t val_period() const { return val_every ? val_every : suppression.t_period; }

  void validate() const {
    schedule.validate();
    suppression.validate();
    if (schedule.total_steps != suppression.t_max)
      throw std::invalid_argument("schedule total_steps must equal the suppression T_max");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (model == ModelKind::Mlp && task != TaskKind::SyntheticRegression)
      throw std::invalid_argument("the MLP trains on synthetic_regression");
    if (model == ModelKind::TinyTransformer && task != TaskKind::CharLM)
      throw std::invalid_argument("the transformer trains on char_lm");
  }
};

/// Desk-scale defaults: the 2-layer character transformer over 5000 steps.
inline TrainRunConfig default_transformer_run() { return {}; }

/// The 784-256-256-10 MLP on the planted-outlier regression task.
inline TrainRunConfig default_mlp_run() {
  TrainRunConfig c;
  c.model = ModelKind::Mlp;
  c.task = TaskKind::SyntheticRegression;
  c.batch_size = 64;
  c.optimizer.lr = 1e-3;
  c.schedule.total_steps = c.suppression.t_max = 600;
  c.schedule.warmup_steps = 30;
  c.suppression.t_start = 400;
  c.suppression.t_period = 100;
  c.suppression.t_accu = 25;
  c.calibration_step = 0;
  return c;
}

inline std::string_view to_string(ModelKind k) { return k == ModelKind::Mlp ? "mlp" : "tiny_transformer"; }
inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::SyntheticRegression ? "synthetic_regression" : "char_lm";
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

using nlohmann::json;

inline json quant_to_json(const LayerQuantConfig& q) {
  json sites = json::object(), formats = json::object();
  for (Site s : kAllSites) {
    sites[std::string(to_string(s))] = q.on(s);
    formats[std::string(to_string(s))] = std::string(to_string(q.fmt(s)));
  }
  json j{{"sites", sites},
         {"formats", formats},
         {"rht_dx", q.rht_dx},
         {"rht_dw", q.rht_dw},
         {"rht_fwd", q.rht_fwd},
         {"weight_block", std::string(to_string(q.weight_block))},
         {"outer", std::string(to_string(q.outer))},
         {"align_xhat", q.align_xhat},
         {"stochastic_backward", q.stochastic_backward},
         {"hadamard_block", q.hadamard_block}};
  if (q.outlier)
    j["outlier"] = {{"ratio_pct", q.outlier->ratio_pct},
                    {"precision", std::string(to_string(q.outlier->precision))},
                    {"style", std::string(to_string(q.outlier->style))},
                    {"channels", q.outlier->channels}};
  else
    j["outlier"] = nullptr;
  return j;
}

inline LayerQuantConfig quant_from_json(const json& j, LayerQuantConfig q) {
  if (j.contains("sites"))
    for (auto& [k, v] : j["sites"].items()) q.enabled[static_cast<std::size_t>(parse_site(k))] = v.get<bool>();
  if (j.contains("formats"))
    for (auto& [k, v] : j["formats"].items())
      q.format[static_cast<std::size_t>(parse_site(k))] = parse_format(v.get<std::string>());
  q.rht_dx = j.value("rht_dx", q.rht_dx);
  q.rht_dw = j.value("rht_dw", q.rht_dw);
  q.rht_fwd = j.value("rht_fwd", q.rht_fwd);
  if (j.contains("weight_block")) q.weight_block = parse_orientation(j["weight_block"].get<std::string>());
  if (j.contains("outer")) q.outer = parse_outer(j["outer"].get<std::string>());
  q.align_xhat = j.value("align_xhat", q.align_xhat);
  q.stochastic_backward = j.value("stochastic_backward", q.stochastic_backward);
  q.hadamard_block = j.value("hadamard_block", q.hadamard_block);
  if (j.contains("outlier")) {
    if (j["outlier"].is_null()) {
      q.outlier.reset();
    } else {
      const json& o = j["outlier"];
      OutlierConfig oc = q.outlier.value_or(OutlierConfig{});
      oc.ratio_pct = o.value("ratio_pct", oc.ratio_pct);
      if (o.contains("precision")) oc.precision = parse_outlier_precision(o["precision"].get<std::string>());
      if (o.contains("style")) oc.style = parse_outlier_style(o["style"].get<std::string>());
      if (o.contains("channels")) oc.channels = o["channels"].get<std::vector<std::size_t>>();
      q.outlier = oc;
    }
  }
  return q;
}

}  // namespace detail

inline nlohmann::json to_json(const TrainRunConfig& c) {
  using nlohmann::json;
  json model{{"kind", std::string(to_string(c.model))}};
  if (c.model == ModelKind::Mlp) {
    model["widths"] = c.mlp.widths;
  } else {
    model["layers"] = c.transformer.layers;
    model["d_model"] = c.transformer.d_model;
    model["heads"] = c.transformer.heads;
    model["seq_len"] = c.transformer.seq_len;
    model["ffn"] = c.transformer.ffn;
  }
  json task{{"kind", std::string(to_string(c.task))}};
  if (c.task == TaskKind::SyntheticRegression) {
    task["dim_in"] = c.regression.dim_in;
    task["dim_out"] = c.regression.dim_out;
    task["teacher_hidden"] = c.regression.teacher_hidden;
    task["planted"] = c.regression.planted;
    task["outlier_scale"] = c.regression.outlier_scale;
    task["val_rows"] = c.regression.val_rows;
  } else {
    task["corpus"] = c.charlm.corpus_path;
    task["synthetic_chars"] = c.charlm.synthetic_chars;
    task["corpus_seed"] = c.charlm.corpus_seed;
    task["val_fraction"] = c.charlm.val_fraction;
    task["val_windows"] = c.charlm.val_windows;
  }
  return json{
      {"model", model},
      {"task", task},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"betas", {c.optimizer.beta1, c.optimizer.beta2}},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"schedule",
       {{"warmup_steps", c.schedule.warmup_steps},
        {"total_steps", c.schedule.total_steps},
        {"floor", c.schedule.floor}}},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"preset", c.preset},
      {"quant", detail::quant_to_json(c.quant)},
      {"fp32_modules", c.fp32_modules},
      {"suppression",
       {{"t_max", c.suppression.t_max},
        {"t_start", c.suppression.t_start},
        {"t_period", c.suppression.t_period},
        {"t_accu", c.suppression.t_accu},
        {"tau", c.suppression.tau},
        {"enabled", c.osci_reset},
        {"measure_threshold", c.osci_measure_threshold}}},
      {"calibration", {{"step", c.calibration_step}, {"batches", c.calibration_batches}}},
      {"val_every", c.val_every},
      {"out", c.out_dir},
  };
}

/// Reads a run config. Missing keys keep the defaults of the chosen model;
/// "preset" is applied first and "quant" overrides individual fields.
inline TrainRunConfig config_from_json(const nlohmann::json& j) {
  const std::string kind = j.contains("model") ? j["model"].value("kind", "tiny_transformer") : "tiny_transformer";
  TrainRunConfig c;
  if (kind == "mlp") c = default_mlp_run();
  else if (kind != "tiny_transformer") throw std::invalid_argument("unknown model kind '" + kind + "'");
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.contains("widths")) c.mlp.widths = m["widths"].get<std::vector<std::size_t>>();
    c.transformer.layers = m.value("layers", c.transformer.layers);
    c.transformer.d_model = m.value("d_model", c.transformer.d_model);
    c.transformer.heads = m.value("heads", c.transformer.heads);
    c.transformer.seq_len = m.value("seq_len", c.transformer.seq_len);
    c.transformer.ffn = m.value("ffn", c.transformer.ffn);
  }
  if (j.contains("task")) {
    const auto& t = j["task"];
    const std::string tk = t.value("kind", std::string(to_string(c.task)));
    if (tk == "synthetic_regression") c.task = TaskKind::SyntheticRegression;
    else if (tk == "char_lm") c.task = TaskKind::CharLM;
    else throw std::invalid_argument("unknown task kind '" + tk + "'");
    c.regression.dim_in = t.value("dim_in", c.regression.dim_in);
    c.regression.dim_out = t.value("dim_out", c.regression.dim_out);
    c.regression.teacher_hidden = t.value("teacher_hidden", c.regression.teacher_hidden);
    c.regression.planted = t.value("planted", c.regression.planted);
    c.regression.outlier_scale = t.value("outlier_scale", c.regression.outlier_scale);
    c.regression.val_rows = t.value("val_rows", c.regression.val_rows);
    c.charlm.corpus_path = t.value("corpus", c.charlm.corpus_path);
    c.charlm.synthetic_chars = t.value("synthetic_chars", c.charlm.synthetic_chars);
    c.charlm.corpus_seed = t.value("corpus_seed", c.charlm.corpus_seed);
    c.charlm.val_fraction = t.value("val_fraction", c.charlm.val_fraction);
    c.charlm.val_windows = t.value("val_windows", c.charlm.val_windows);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    if (o.contains("betas")) {
      const auto b = o["betas"].get<std::vector<double>>();
      if (b.size() != 2) throw std::invalid_argument("optimizer.betas needs two values");
      c.optimizer.beta1 = b[0];
      c.optimizer.beta2 = b[1];
    }
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    c.schedule.warmup_steps = s.value("warmup_steps", c.schedule.warmup_steps);
    c.schedule.total_steps = s.value("total_steps", c.schedule.total_steps);
    c.schedule.floor = s.value("floor", c.schedule.floor);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("preset")) {
    c.preset = j["preset"].get<std::string>();
    c.quant = preset(c.preset);
  }
  if (j.contains("quant")) c.quant = detail::quant_from_json(j["quant"], c.quant);
  if (j.contains("fp32_modules")) c.fp32_modules = j["fp32_modules"].get<std::vector<std::string>>();
  c.suppression.t_max = c.schedule.total_steps;
  if (j.contains("suppression")) {
    const auto& s = j["suppression"];
    c.suppression.t_max = s.value("t_max", c.suppression.t_max);
    c.suppression.t_start = s.value("t_start", c.suppression.t_start);
    c.suppression.t_period = s.value("t_period", c.suppression.t_period);
    c.suppression.t_accu = s.value("t_accu", c.suppression.t_accu);
    c.suppression.tau = s.value("tau", c.suppression.tau);
    c.osci_reset = s.value("enabled", c.osci_reset);
    c.osci_measure_threshold = s.value("measure_threshold", c.osci_measure_threshold);
  }
  if (j.contains("calibration")) {
    c.calibration_step = j["calibration"].value("step", c.calibration_step);
    c.calibration_batches = j["calibration"].value("batches", c.calibration_batches);
  }
  c.val_every = j.value("val_every", c.val_every);
  c.out_dir = j.value("out", c.out_dir);
  c.validate();
  return c;
}

inline TrainRunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  return config_from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Run state and report

struct MetricsRow {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double lr = 0.0;
  std::size_t resets = 0;
  std::size_t clamp_events = 0;
};

struct RunReport {
  nlohmann::json config;  // resolved config plus per-layer outlier channels
  std::vector<MetricsRow> metrics;
  std::vector<OscillationWindow> windows;

  std::optional<double> final_val_loss() const {
    for (auto it = metrics.rbegin(); it != metrics.rend(); ++it)
      if (it->val_loss) return it->val_loss;
    return std::nullopt;
  }

  /// Mean training loss over the last `n` steps; single batches are noisy.
  double final_train_loss(std::size_t n = 50) const {
    if (metrics.empty()) return 0.0;
    const std::size_t k = std::min(n, metrics.size());
    double s = 0.0;
    for (std::size_t i = metrics.size() - k; i < metrics.size(); ++i) s += metrics[i].train_loss;
    return s / static_cast<double>(k);
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kMetricsSchema = "# fp4sim metrics v1";

class Trainer {
 public:
  explicit Trainer(TrainRunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.model == ModelKind::Mlp) {
      MlpConfig m = cfg_.mlp;
      m.batch = cfg_.batch_size;
      model_ = std::make_unique<MlpRegression>(m, std::make_shared<RegressionTask>(cfg_.regression, cfg_.seed),
                                               cfg_.seed);
    } else {
      TransformerConfig t = cfg_.transformer;
      t.batch = cfg_.batch_size;
      model_ = std::make_unique<CharTransformer>(t, std::make_shared<CharCorpus>(cfg_.charlm), cfg_.seed);
    }
    LayerQuantConfig q = cfg_.quant;
    if (q.outlier) q.outlier->channels.clear();  // filled at calibration
    apply_quant(q);
    report_.config = to_json(cfg_);
    if (cfg_.calibration_step == 0) calibrate();
  }

  Trainer(const Trainer& o)
      : cfg_(o.cfg_), model_(o.model_->clone()), step_(o.step_), report_(o.report_), calibrated_(o.calibrated_) {}
  Trainer& operator=(const Trainer& o) {
    if (this != &o) *this = Trainer(o);
    return *this;
  }
  Trainer(Trainer&&) noexcept = default;
  Trainer& operator=(Trainer&&) noexcept = default;

  std::uint64_t step_count() const { return step_; }
  const TrainRunConfig& config() const { return cfg_; }
  const RunReport& report() const { return report_; }
  Model& model() { return *model_; }

  /// Turns the oscillation reset on or off from the next step on; tracking
  /// and the per-window export continue either way.
  void set_reset_enabled(bool on) {
    cfg_.osci_reset = on;
    report_.config["suppression"]["enabled"] = on;
    if (step_ > 0) report_.config["suppression"]["changed_after_step"] = step_;
  }

  /// Where finish() writes; forks need their own directory.
  void set_output_dir(std::string dir) {
    cfg_.out_dir = std::move(dir);
    report_.config["out"] = cfg_.out_dir;
  }

  /// Switches every quantized layer to `mode` from the next step on.
  void set_precision_mode(PrecisionMode mode) {
    for (QLinear* l : model_->linears())
      if (l->cfg.any_enabled()) l->cfg = fp4sim::set_precision_mode(l->cfg, mode);
    report_.config["precision_switch"] = {{"after_step", step_}, {"mode", std::string(to_string(mode))}};
  }

  void run_until(std::uint64_t t) {
    while (step_ < t) step();
  }

  void step() {
    const std::uint64_t t = ++step_;
    Model& m = *model_;
    const auto params = m.params();
    for (Param* p : params) p->zero_grad();
    QuantStats stats;
    const double loss = m.train_loss(cfg_.seed, t, &stats);
    const double lr = cfg_.schedule.lr(t, cfg_.optimizer.lr);
    double gmax = 0.0;
    for (Param* p : params)
      for (float g : p->grad.data) gmax = std::max(gmax, static_cast<double>(std::fabs(g)));
    if (!std::isfinite(loss) || !std::isfinite(gmax)) {
      std::ostringstream os;
      os << "training diverged at step " << t << ": loss " << loss << ", lr " << lr << ", max |grad| " << gmax
         << ", clamp events this step " << stats.clamp_events;
      if (!report_.metrics.empty()) os << ", previous step clamps " << report_.metrics.back().clamp_events;
      throw TrainingDiverged(os.str());
    }
    for (Param* p : params) adamw_step(*p, cfg_.optimizer, lr, t);

    MetricsRow row;
    row.step = t;
    row.train_loss = loss;
    row.lr = lr;
    row.clamp_events = stats.clamp_events;
    row.resets = oscillation_hook(t);
    if (!calibrated_ && t == cfg_.calibration_step) calibrate();
    if (t % cfg_.val_period() == 0 || t == cfg_.total_steps()) row.val_loss = m.val_loss(cfg_.seed, t);
    report_.metrics.push_back(row);
  }

  /// Runs the remaining steps and writes the report if out_dir is set.
  const RunReport& finish() {
    run_until(cfg_.total_steps());
    if (!cfg_.out_dir.empty()) write_report(cfg_.out_dir, report_);
    return report_;
  }

  static void write_report(const std::filesystem::path& dir, const RunReport& r) {
    std::filesystem::create_directories(dir);
    {
      std::ofstream os(dir / "metrics.csv");
      write_metrics(os, r);
    }
    {
      std::ofstream os(dir / "oscillation.csv");
      write_oscillation_header(os);
      for (const auto& w : r.windows) write_oscillation_row(os, w);
    }
    std::ofstream os(dir / "config.json");
    os << r.config.dump(2) << '\n';
  }

  static void write_metrics(std::ostream& os, const RunReport& r) {
    os << kMetricsSchema << "\nstep,train_loss,val_loss,lr,resets,clamp_events\n" << std::setprecision(9);
    for (const auto& m : r.metrics) {
      os << m.step << ',' << m.train_loss << ',';
      if (m.val_loss) os << *m.val_loss;
      os << ',' << m.lr << ',' << m.resets << ',' << m.clamp_events << '\n';
    }
  }

 private:
  static bool module_excluded(const std::string& name, const std::vector<std::string>& excl) {
    return std::any_of(excl.begin(), excl.end(), [&](const std::string& e) { return name.find(e) != std::string::npos; });
  }

  void apply_quant(const LayerQuantConfig& q) {
    for (QLinear* l : model_->linears()) l->cfg = module_excluded(l->name(), cfg_.fp32_modules) ? preset_fp32() : q;
  }

  /// Records binary32 inputs of every linear layer on a few training
  /// batches and picks each layer's outlier channels from them.
  void calibrate() {
    calibrated_ = true;
    if (!cfg_.quant.outlier || cfg_.quant.outlier->style == OutlierStyle::None) return;
    const auto linears = model_->linears();
    std::vector<LayerQuantConfig> saved;
    for (QLinear* l : linears) {
      saved.push_back(l->cfg);
      l->cfg = preset_fp32();
      l->record_input = true;
    }
    std::vector<std::vector<Matrix>> inputs(linears.size());
    for (std::size_t b = 0; b < cfg_.calibration_batches; ++b) {
      model_->calibration_forward(cfg_.seed, b);
      for (std::size_t i = 0; i < linears.size(); ++i) inputs[i].push_back(std::move(linears[i]->last_input));
    }
    nlohmann::json chosen = nlohmann::json::object();
    for (std::size_t i = 0; i < linears.size(); ++i) {
      QLinear& l = *linears[i];
      l.record_input = false;
      l.cfg = saved[i];
      if (!l.cfg.outlier) continue;
      RngStream rng(cfg_.seed, "outlier-select", l.layer_id);
      const OutlierConfig& o = *cfg_.quant.outlier;
      l.cfg.outlier = select_outlier_channels(inputs[i], o.ratio_pct, o.style, &rng, o.precision);
      chosen[l.name()] = l.cfg.outlier->channels;
    }
    report_.config["outlier_channels"] = chosen;
  }

  /// The suppression hook after the optimizer step at `t`. Returns the
  /// number of weights reset.
  std::size_t oscillation_hook(std::uint64_t t) {
    const HookAction a = suppression_hook(t, cfg_.suppression);
    if (a.kind == HookAction::None) return 0;
    std::size_t total = 0;
    for (QLinear* l : model_->linears()) {
      const LayerQuantConfig& q = l->cfg;
      if (!q.on(Site::FwdW) || q.rht_fwd) continue;
      const QuantizedMatrix live = quantize(l->weight.w, detail::site_spec(q, Site::FwdW, q.weight_block),
                                            RoundingMode::Deterministic);
      if (a.kind == HookAction::Accumulate) {
        update_oscillation_stats(l->weight.w, live, l->tracker, a.t0);
      } else {
        const std::size_t n =
            cfg_.osci_reset ? oscillation_suppress(l->weight.w, l->tracker, live, cfg_.suppression.tau) : 0;
        report_.windows.push_back(summarize_window(t, l->name(), l->tracker, cfg_.suppression.tau, n));
        total += n;
      }
    }
    return total;
  }

  TrainRunConfig cfg_;
  std::unique_ptr<Model> model_;
  std::uint64_t step_ = 0;
  RunReport report_;
  bool calibrated_ = false;
};

inline RunReport train(const TrainRunConfig& cfg) {
  Trainer t(cfg);
  return t.finish();
}

/// Trains in the configured precision until `switch_step`, then in `mode`.
inline RunReport precision_switch_run(const TrainRunConfig& cfg, std::uint64_t switch_step, PrecisionMode mode) {
  if (switch_step > cfg.total_steps()) throw std::invalid_argument("switch step beyond T_max");
  Trainer t(cfg);
  t.run_until(switch_step);
  if (switch_step < cfg.total_steps()) t.set_precision_mode(mode);
  return t.finish();
}

/// One entry of a loss decomposition: the quantizer sites left on, and the
/// linear modules kept in binary32.
struct SweepSubset {
  std::string id;
  std::vector<Site> sites;
  std::vector<std::string> fp32_modules;
};

struct SweepRow {
  std::string id;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  double delta_train = 0.0;  // vs the all-binary32 run
  double delta_val = 0.0;
};

inline TrainRunConfig subset_config(TrainRunConfig cfg, const SweepSubset& s) {
  cfg.quant.enabled.fill(false);
  for (Site site : s.sites) cfg.quant.enabled[static_cast<std::size_t>(site)] = true;
  cfg.fp32_modules = s.fp32_modules;
  if (!cfg.out_dir.empty()) cfg.out_dir = (std::filesystem::path(cfg.out_dir) / s.id).string();
  return cfg;
}

/// One run per subset with identical seeds; deltas are against a run with
/// every site off. Runs are independent and go to `jobs` worker threads;
/// with an out_dir each run writes under its own <out_dir>/<id>.
inline std::vector<SweepRow> loss_decomposition_sweep(const TrainRunConfig& cfg,
                                                      const std::vector<SweepSubset>& subsets,
                                                      std::size_t jobs = 1) {
  std::vector<SweepSubset> all{{"bypass", {}, {}}};
  all.insert(all.end(), subsets.begin(), subsets.end());
  std::vector<RunReport> reports(all.size());
  std::vector<std::exception_ptr> errors(all.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next++) < all.size();) {
      try {
        reports[i] = train(subset_config(cfg, all[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < std::clamp<std::size_t>(jobs, 1, all.size()); ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const double ref_train = reports[0].final_train_loss(), ref_val = reports[0].final_val_loss().value_or(0.0);
  std::vector<SweepRow> rows;
  for (std::size_t i = 1; i < all.size(); ++i) {
    SweepRow row;
    row.id = all[i].id;
    row.final_train_loss = reports[i].final_train_loss();
    row.final_val_loss = reports[i].final_val_loss().value_or(0.0);
    row.delta_train = row.final_train_loss - ref_train;
    row.delta_val = row.final_val_loss - ref_val;
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kSweepSchema = "# fp4sim sweep v1";

inline void write_sweep(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << kSweepSchema << "\nsubset,final_train_loss,final_val_loss,delta_train,delta_val\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << r.id << ',' << r.final_train_loss << ',' << r.final_val_loss << ',' << r.delta_train << ',' << r.delta_val
       << '\n';
}

}  // namespace fp4sim
