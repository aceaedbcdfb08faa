// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Toy models with hand-written backward passes. Only the linear layers go
// through the quantized path; embeddings, norms, attention scores and the LM
// head stay in binary32.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp4sim/data.hpp"
#include "fp4sim/matrix.hpp"
#include "fp4sim/optim.hpp"
#include "fp4sim/oscillation.hpp"
#include "fp4sim/qlinear.hpp"

namespace fp4sim {

inline Matrix normal_matrix(std::size_t r, std::size_t c, double sd, RngStream& rng) {
  Matrix m(r, c);
  for (float& v : m.data) v = static_cast<float>(rng.normal() * sd);
  return m;
}

/// A linear layer y = Q(x) Q(W)^T + b with its quantizer config, the cache
/// its backward needs and an oscillation tracker for W.
struct QLinear {
  std::string label;
  Param weight;
  std::optional<Param> bias;
  LayerQuantConfig cfg;
  std::uint64_t layer_id = 0;
  LinearCache cache;
  OscillationTracker tracker;
  bool record_input = false;
  Matrix last_input;

  QLinear() = default;
  QLinear(std::string name, std::size_t in, std::size_t out, bool with_bias, std::uint64_t id, double sd,
          RngStream& rng)
      : label(name), weight(name + ".w", normal_matrix(out, in, sd, rng)), layer_id(id), tracker(out, in) {
    if (with_bias) bias = Param(name + ".b", Matrix(1, out), false);
  }

  const std::string& name() const { return label; }

  Matrix forward(const Matrix& x, std::uint64_t seed, std::uint64_t step, QuantStats* stats) {
    if (record_input) last_input = x;
    ForwardResult r = linear_forward(x, weight.w, cfg, {seed, layer_id, step}, stats);
    cache = std::move(r.cache);
    if (bias)
      for (std::size_t i = 0; i < r.y.rows; ++i)
        for (std::size_t j = 0; j < r.y.cols; ++j) r.y(i, j) += bias->w.data[j];
    return std::move(r.y);
  }

  /// Accumulates dW (and db) and returns dX.
  Matrix backward(const Matrix& dy, std::uint64_t step, QuantStats* stats) {
    BackwardResult r = linear_backward(dy, cache, cfg, step, stats);
    add_inplace(weight.grad, r.dw);
    if (bias)
      for (std::size_t i = 0; i < dy.rows; ++i)
        for (std::size_t j = 0; j < dy.cols; ++j) bias->grad.data[j] += dy(i, j);
    return std::move(r.dx);
  }
};

/// Everything the trainer needs from a model bound to its task.
class Model {
 public:
  virtual ~Model() = default;
  /// Forward and backward on the batch of `step`; gradients are added to
  /// the parameters. Returns the batch loss.
  virtual double train_loss(std::uint64_t seed, std::uint64_t step, QuantStats* stats) = 0;
  virtual double val_loss(std::uint64_t seed, std::uint64_t step) = 0;
  /// Forward only on a training batch, used to record linear inputs.
  virtual void calibration_forward(std::uint64_t seed, std::uint64_t index) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual std::vector<QLinear*> linears() = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
};

// ---------------------------------------------------------------------------
// MLP on the teacher regression task.

struct MlpConfig {
  std::vector<std::size_t> widths{784, 256, 256, 10};
  std::size_t batch = 64;
};

class MlpRegression final : public Model {
 public:
  MlpRegression(const MlpConfig& c, std::shared_ptr<const RegressionTask> task, std::uint64_t seed)
      : cfg_(c), task_(std::move(task)) {
    if (c.widths.size() < 2) throw std::invalid_argument("mlp needs at least input and output widths");
    if (c.widths.front() != task_->config().dim_in || c.widths.back() != task_->config().dim_out)
      throw std::invalid_argument("mlp widths do not match the regression task");
    RngStream rng(seed, "init");
    for (std::size_t l = 0; l + 1 < c.widths.size(); ++l)
      layers_.emplace_back("fc" + std::to_string(l + 1), c.widths[l], c.widths[l + 1], true, l,
                           std::sqrt(2.0 / static_cast<double>(c.widths[l])), rng);
  }

  double train_loss(std::uint64_t seed, std::uint64_t step, QuantStats* stats) override {
    Matrix x, y;
    task_->batch(step, cfg_.batch, x, y);
    std::vector<Matrix> pre;
    const Matrix out = forward(x, seed, step, stats, &pre);
    Matrix g(out.rows, out.cols);
    const double loss = mse_loss(out, y, &g);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size())
        for (std::size_t i = 0; i < g.size(); ++i)
          if (pre[l].data[i] <= 0.0f) g.data[i] = 0.0f;
      g = layers_[l].backward(g, step, stats);
    }
    return loss;
  }

  double val_loss(std::uint64_t seed, std::uint64_t step) override {
    return mse_loss(forward(task_->val_x(), seed, step, nullptr, nullptr), task_->val_y(), nullptr);
  }

  void calibration_forward(std::uint64_t seed, std::uint64_t index) override {
    Matrix x, y;
    task_->batch(~index, cfg_.batch, x, y);
    forward(x, seed, 0, nullptr, nullptr);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> p;
    for (auto& l : layers_) {
      p.push_back(&l.weight);
      if (l.bias) p.push_back(&*l.bias);
    }
    return p;
  }

  std::vector<QLinear*> linears() override {
    std::vector<QLinear*> p;
    for (auto& l : layers_) p.push_back(&l);
    return p;
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<MlpRegression>(*this); }

  /// Mean over all outputs of (out - y)^2; fills d loss / d out if asked.
  static double mse_loss(const Matrix& out, const Matrix& y, Matrix* grad) {
    double s = 0.0;
    const double scale = 1.0 / static_cast<double>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = static_cast<double>(out.data[i]) - y.data[i];
      s += d * d;
      if (grad) grad->data[i] = static_cast<float>(2.0 * d * scale);
    }
    return s * scale;
  }

 private:
  Matrix forward(const Matrix& x, std::uint64_t seed, std::uint64_t step, QuantStats* stats,
                 std::vector<Matrix>* pre) {
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = layers_[l].forward(h, seed, step, stats);
      if (l + 1 < layers_.size()) {
        if (pre) pre->push_back(h);
        for (float& v : h.data) v = std::max(v, 0.0f);
      }
    }
    return h;
  }

  MlpConfig cfg_;
  std::shared_ptr<const RegressionTask> task_;
  std::vector<QLinear> layers_;
};

// ---------------------------------------------------------------------------
// Pre-LN decoder-only transformer on characters.

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t seq_len = 128;
  std::size_t ffn = 256;
  std::size_t batch = 1;  // sequences per step
};

namespace detail {

struct LnCache {
  Matrix xhat;
  std::vector<float> rstd;
};

inline Matrix layer_norm(const Matrix& x, const Param& g, const Param& b, LnCache* cache) {
  Matrix y(x.rows, x.cols);
  if (cache) {
    cache->xhat = Matrix(x.rows, x.cols);
    cache->rstd.assign(x.rows, 0.0f);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= n;
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    const double rstd = 1.0 / std::sqrt(var / n + 1e-5);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const float xh = static_cast<float>((x(r, c) - mean) * rstd);
      if (cache) cache->xhat(r, c) = xh;
      y(r, c) = xh * g.w.data[c] + b.w.data[c];
    }
    if (cache) cache->rstd[r] = static_cast<float>(rstd);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LnCache& cache, Param& g, Param& b) {
  Matrix dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      const double dxh = static_cast<double>(dy(r, c)) * g.w.data[c];
      m1 += dxh;
      m2 += dxh * cache.xhat(r, c);
      g.grad.data[c] += dy(r, c) * cache.xhat(r, c);
      b.grad.data[c] += dy(r, c);
    }
    m1 /= n;
    m2 /= n;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      const double dxh = static_cast<double>(dy(r, c)) * g.w.data[c];
      dx(r, c) = static_cast<float>(cache.rstd[r] * (dxh - m1 - cache.xhat(r, c) * m2));
    }
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline float gelu(float x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return static_cast<float>(0.5 * x * (1.0 + t));
}

inline float gelu_grad(float x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return static_cast<float>(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3 * 0.044715 * x * x));
}

}  // namespace detail

class CharTransformer final : public Model {
 public:
  CharTransformer(const TransformerConfig& c, std::shared_ptr<const CharCorpus> corpus, std::uint64_t seed)
      : cfg_(c), corpus_(std::move(corpus)) {
    if (c.heads == 0 || c.d_model % c.heads != 0) throw std::invalid_argument("d_model must split across heads");
    const std::size_t d = c.d_model, v = corpus_->vocab_size();
    RngStream rng(seed, "init");
    const double sd = 0.02, sd_out = 0.02 / std::sqrt(2.0 * static_cast<double>(c.layers));
    tok_ = Param("tok_emb", normal_matrix(v, d, sd, rng), false);
    pos_ = Param("pos_emb", normal_matrix(c.seq_len, d, sd, rng), false);
    std::uint64_t id = 0;
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      Block b;
      b.ln1g = Param(p + "ln1.g", Matrix(1, d, 1.0f), false);
      b.ln1b = Param(p + "ln1.b", Matrix(1, d), false);
      b.qkv = QLinear(p + "qkv", d, 3 * d, false, id++, sd, rng);
      b.out = QLinear(p + "attn.out", d, d, false, id++, sd_out, rng);
      b.ln2g = Param(p + "ln2.g", Matrix(1, d, 1.0f), false);
      b.ln2b = Param(p + "ln2.b", Matrix(1, d), false);
      b.ffn1 = QLinear(p + "ffn1", d, c.ffn, false, id++, sd, rng);
      b.ffn2 = QLinear(p + "ffn2", c.ffn, d, false, id++, sd_out, rng);
      blocks_.push_back(std::move(b));
    }
    lnfg_ = Param("lnf.g", Matrix(1, d, 1.0f), false);
    lnfb_ = Param("lnf.b", Matrix(1, d), false);
    head_ = Param("head", normal_matrix(v, d, sd, rng));
  }

  double train_loss(std::uint64_t seed, std::uint64_t step, QuantStats* stats) override {
    const auto batch = corpus_->train_batch(seed, step, cfg_.batch, cfg_.seq_len);
    Matrix dlogits;
    const double loss = run(batch, seed, step, stats, &dlogits);
    backward(dlogits, batch, step, stats);
    return loss;
  }

  double val_loss(std::uint64_t seed, std::uint64_t step) override {
    const auto windows = corpus_->val_batch(cfg_.seq_len);
    double total = 0.0;
    for (std::size_t i = 0; i < windows.size(); i += cfg_.batch) {
      const std::size_t e = std::min(windows.size(), i + cfg_.batch);
      const std::vector<std::vector<int>> chunk(windows.begin() + static_cast<std::ptrdiff_t>(i),
                                                windows.begin() + static_cast<std::ptrdiff_t>(e));
      total += run(chunk, seed, step, nullptr, nullptr) * static_cast<double>(e - i);
    }
    return total / static_cast<double>(windows.size());
  }

  void calibration_forward(std::uint64_t seed, std::uint64_t index) override {
    run(corpus_->train_batch(seed, ~index, cfg_.batch, cfg_.seq_len), seed, 0, nullptr, nullptr);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> p{&tok_, &pos_};
    for (auto& b : blocks_)
      for (Param* q : {&b.ln1g, &b.ln1b, &b.qkv.weight, &b.out.weight, &b.ln2g, &b.ln2b, &b.ffn1.weight,
                       &b.ffn2.weight})
        p.push_back(q);
    for (Param* q : {&lnfg_, &lnfb_, &head_}) p.push_back(q);
    return p;
  }

  std::vector<QLinear*> linears() override {
    std::vector<QLinear*> p;
    for (auto& b : blocks_)
      for (QLinear* q : {&b.qkv, &b.out, &b.ffn1, &b.ffn2}) p.push_back(q);
    return p;
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<CharTransformer>(*this); }

 private:
  struct Block {
    Param ln1g, ln1b, ln2g, ln2b;
    QLinear qkv, out, ffn1, ffn2;
    // forward state for backward
    detail::LnCache ln1, ln2;
    Matrix qkv_out;
    std::vector<Eigen::MatrixXf> probs;  // one T x T per (sequence, head)
    Matrix f_pre;
  };

  using EMat = Eigen::MatrixXf;

  /// Causal multi-head attention over qkv [B*T x 3d]; returns [B*T x d].
  Matrix attention(Block& b, const Matrix& qkv, bool keep) {
    const std::size_t t = cfg_.seq_len, d = cfg_.d_model, nh = cfg_.heads, dh = d / nh;
    const std::size_t nb = qkv.rows / t;
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix o(qkv.rows, d);
    if (keep) b.probs.assign(nb * nh, EMat());
    EMat q(t, dh), k(t, dh), v(t, dh);
    for (std::size_t s = 0; s < nb; ++s)
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            const std::size_t r = s * t + i;
            q(i, j) = qkv(r, h * dh + j);
            k(i, j) = qkv(r, d + h * dh + j);
            v(i, j) = qkv(r, 2 * d + h * dh + j);
          }
        EMat p = (q * k.transpose()) * scale;
        for (std::size_t i = 0; i < t; ++i) {
          float mx = p(i, 0);
          for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
          double z = 0.0;
          for (std::size_t j = 0; j <= i; ++j) z += p(i, j) = std::exp(p(i, j) - mx);
          const float inv = static_cast<float>(1.0 / z);
          for (std::size_t j = 0; j <= i; ++j) p(i, j) *= inv;
          for (std::size_t j = i + 1; j < t; ++j) p(i, j) = 0.0f;
        }
        const EMat oh = p * v;
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) o(s * t + i, h * dh + j) = oh(i, j);
        if (keep) b.probs[s * nh + h] = std::move(p);
      }
    return o;
  }

  Matrix attention_backward(const Block& b, const Matrix& dout) {
    const std::size_t t = cfg_.seq_len, d = cfg_.d_model, nh = cfg_.heads, dh = d / nh;
    const std::size_t nb = dout.rows / t;
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix dqkv(dout.rows, 3 * d);
    EMat q(t, dh), k(t, dh), v(t, dh), dO(t, dh);
    for (std::size_t s = 0; s < nb; ++s)
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            const std::size_t r = s * t + i;
            q(i, j) = b.qkv_out(r, h * dh + j);
            k(i, j) = b.qkv_out(r, d + h * dh + j);
            v(i, j) = b.qkv_out(r, 2 * d + h * dh + j);
            dO(i, j) = dout(r, h * dh + j);
          }
        const EMat& p = b.probs[s * nh + h];
        const EMat dv = p.transpose() * dO;
        EMat dp = dO * v.transpose();
        for (std::size_t i = 0; i < t; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot += static_cast<double>(dp(i, j)) * p(i, j);
          for (std::size_t j = 0; j < t; ++j)
            dp(i, j) = j <= i ? static_cast<float>(p(i, j) * (dp(i, j) - dot)) * scale : 0.0f;
        }
        const EMat dq = dp * k;
        const EMat dk = dp.transpose() * q;
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            const std::size_t r = s * t + i;
            dqkv(r, h * dh + j) = dq(i, j);
            dqkv(r, d + h * dh + j) = dk(i, j);
            dqkv(r, 2 * d + h * dh + j) = dv(i, j);
          }
      }
    return dqkv;
  }

  /// Forward pass and mean next-token cross-entropy. With `dlogits` set the
  /// state for backward is kept and d loss / d logits is written.
  double run(const std::vector<std::vector<int>>& batch, std::uint64_t seed, std::uint64_t step, QuantStats* stats,
             Matrix* dlogits) {
    const bool keep = dlogits != nullptr;
    const std::size_t t = cfg_.seq_len, d = cfg_.d_model;
    Matrix h(batch.size() * t, d);
    for (std::size_t s = 0; s < batch.size(); ++s)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < d; ++c)
          h(s * t + i, c) = tok_.w(static_cast<std::size_t>(batch[s][i]), c) + pos_.w(i, c);
    for (Block& b : blocks_) {
      Matrix a = detail::layer_norm(h, b.ln1g, b.ln1b, keep ? &b.ln1 : nullptr);
      Matrix qkv = b.qkv.forward(a, seed, step, stats);
      const Matrix att = attention(b, qkv, keep);
      if (keep) b.qkv_out = std::move(qkv);
      add_inplace(h, b.out.forward(att, seed, step, stats));
      a = detail::layer_norm(h, b.ln2g, b.ln2b, keep ? &b.ln2 : nullptr);
      Matrix f = b.ffn1.forward(a, seed, step, stats);
      Matrix g(f.rows, f.cols);
      for (std::size_t i = 0; i < f.size(); ++i) g.data[i] = detail::gelu(f.data[i]);
      if (keep) b.f_pre = std::move(f);
      add_inplace(h, b.ffn2.forward(g, seed, step, stats));
    }
    hf_ = detail::layer_norm(h, lnfg_, lnfb_, keep ? &lnf_ : nullptr);
    Matrix logits = matmul_nt(hf_, head_.w);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(logits.rows);
    if (keep) *dlogits = Matrix(logits.rows, logits.cols);
    for (std::size_t s = 0; s < batch.size(); ++s)
      for (std::size_t i = 0; i < t; ++i) {
        const std::size_t r = s * t + i;
        const auto row = logits.row(r);
        float mx = row[0];
        for (float x : row) mx = std::max(mx, x);
        double z = 0.0;
        for (float x : row) z += std::exp(static_cast<double>(x - mx));
        const auto target = static_cast<std::size_t>(batch[s][i + 1]);
        loss -= static_cast<double>(row[target] - mx) - std::log(z);
        if (keep) {
          for (std::size_t c = 0; c < row.size(); ++c)
            (*dlogits)(r, c) = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z * inv_n);
          (*dlogits)(r, target) -= static_cast<float>(inv_n);
        }
      }
    return loss * inv_n;
  }

  void backward(const Matrix& dlogits, const std::vector<std::vector<int>>& batch, std::uint64_t step,
                QuantStats* stats) {
    add_inplace(head_.grad, matmul_tn(dlogits, hf_));
    Matrix dh = detail::layer_norm_backward(matmul(dlogits, head_.w), lnf_, lnfg_, lnfb_);
    for (std::size_t l = blocks_.size(); l-- > 0;) {
      Block& b = blocks_[l];
      Matrix dg = b.ffn2.backward(dh, step, stats);
      for (std::size_t i = 0; i < dg.size(); ++i) dg.data[i] *= detail::gelu_grad(b.f_pre.data[i]);
      add_inplace(dh, detail::layer_norm_backward(b.ffn1.backward(dg, step, stats), b.ln2, b.ln2g, b.ln2b));
      const Matrix datt = b.out.backward(dh, step, stats);
      const Matrix dqkv = attention_backward(b, datt);
      add_inplace(dh, detail::layer_norm_backward(b.qkv.backward(dqkv, step, stats), b.ln1, b.ln1g, b.ln1b));
    }
    const std::size_t t = cfg_.seq_len, d = cfg_.d_model;
    for (std::size_t s = 0; s < batch.size(); ++s)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < d; ++c) {
          tok_.grad(static_cast<std::size_t>(batch[s][i]), c) += dh(s * t + i, c);
          pos_.grad(i, c) += dh(s * t + i, c);
        }
  }

  TransformerConfig cfg_;
  std::shared_ptr<const CharCorpus> corpus_;
  Param tok_, pos_, lnfg_, lnfb_, head_;
  std::vector<Block> blocks_;
  detail::LnCache lnf_;
  Matrix hf_;
};

}  // namespace fp4sim
