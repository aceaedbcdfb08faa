// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// Toy tasks for the trainer: a teacher-network regression with planted
// outlier input channels, and character-level language modelling.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp4sim/matrix.hpp"
#include "fp4sim/rng.hpp"

namespace fp4sim {

struct RegressionConfig {
  std::size_t dim_in = 784;
  std::size_t dim_out = 10;
  std::size_t teacher_hidden = 64;
  std::size_t planted = 8;  // outlier input channels
  double outlier_scale = 40.0;
  std::size_t val_rows = 512;
};

/// y = T2 tanh(T1 z / sqrt(D)) on standard-normal z. The network sees x,
/// which is z with the planted channels multiplied by outlier_scale, so
/// every channel carries the same amount of signal.
class RegressionTask {
 public:
  RegressionTask(const RegressionConfig& c, std::uint64_t seed) : cfg_(c), seed_(seed) {
    RngStream rng(seed, "teacher");
    t1_ = Matrix(c.teacher_hidden, c.dim_in);
    t2_ = Matrix(c.dim_out, c.teacher_hidden);
    for (float& v : t1_.data) v = static_cast<float>(rng.normal() * 2.0);
    for (float& v : t2_.data) v = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(c.teacher_hidden)));
    std::vector<std::size_t> idx(c.dim_in);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    RngStream pick(seed, "planted");
    for (std::size_t i = 0; i < std::min(c.planted, c.dim_in); ++i)
      std::swap(idx[i], idx[i + pick.uniform_index(c.dim_in - i)]);
    planted_.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(c.planted, c.dim_in)));
    std::sort(planted_.begin(), planted_.end());
    RngStream vr(seed, "regression-val");
    make(vr, c.val_rows, val_x_, val_y_);
  }

  void batch(std::uint64_t step, std::size_t rows, Matrix& x, Matrix& y) const {
    RngStream rng(seed_, "regression", step);
    make(rng, rows, x, y);
  }

  const Matrix& val_x() const { return val_x_; }
  const Matrix& val_y() const { return val_y_; }
  const std::vector<std::size_t>& planted() const { return planted_; }
  const RegressionConfig& config() const { return cfg_; }

 private:
  void make(RngStream& rng, std::size_t rows, Matrix& x, Matrix& y) const {
    const std::size_t d = cfg_.dim_in;
    Matrix z(rows, d);
    for (float& v : z.data) v = static_cast<float>(rng.normal());
    Matrix h = matmul_nt(z, t1_);
    const float inv = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    for (float& v : h.data) v = std::tanh(v * inv);
    y = matmul_nt(h, t2_);
    x = std::move(z);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c : planted_) x(r, c) *= static_cast<float>(cfg_.outlier_scale);
  }

  RegressionConfig cfg_;
  std::uint64_t seed_;
  Matrix t1_, t2_;
  std::vector<std::size_t> planted_;
  Matrix val_x_, val_y_;
};

/// Pseudo-English text: a few hundred invented words, Zipf-weighted
/// unigrams and a sparse word bigram chain, punctuated into sentences and
/// paragraphs. Stands in for a public-domain corpus when none is given.
inline std::string synthetic_corpus(std::size_t chars, std::uint64_t seed = 0) {
  RngStream rng(seed, "corpus");
  static constexpr std::array<const char*, 12> onsets{"", "b", "d", "f", "k", "l", "m", "n", "r", "s", "t", "th"};
  static constexpr std::array<const char*, 6> vowels{"a", "e", "i", "o", "u", "ea"};
  static constexpr std::array<const char*, 6> codas{"", "n", "r", "s", "st", "nd"};
  const std::size_t n_words = 400;
  std::vector<std::string> words;
  while (words.size() < n_words) {
    const std::size_t syl = 1 + rng.uniform_index(3);
    std::string w;
    for (std::size_t s = 0; s < syl; ++s) {
      w += onsets[rng.uniform_index(onsets.size())];
      w += vowels[rng.uniform_index(vowels.size())];
      if (s + 1 == syl) w += codas[rng.uniform_index(codas.size())];
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  }
  // Zipf sampling by inverse CDF over ranks.
  std::vector<double> cdf(n_words);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_words; ++i) cdf[i] = acc += 1.0 / static_cast<double>(i + 1);
  for (double& c : cdf) c /= acc;
  const auto zipf = [&] {
    return static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), rng.uniform()) - cdf.begin());
  };
  const std::size_t fanout = 6;
  std::vector<std::size_t> next(n_words * fanout);
  for (std::size_t& v : next) v = zipf();

  std::string out;
  out.reserve(chars + 64);
  std::size_t w = zipf();
  while (out.size() < chars) {
    const std::size_t len = 4 + rng.uniform_index(10);
    for (std::size_t k = 0; k < len; ++k) {
      std::string word = words[w];
      if (k == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      out += word;
      if (k + 1 < len) out += (rng.uniform() < 0.08 ? ", " : " ");
      // Mostly follow the chain, sometimes jump.
      w = rng.uniform() < 0.85 ? next[w * fanout + rng.uniform_index(fanout)] : zipf();
    }
    out += rng.uniform() < 0.1 ? "?" : ".";
    out += rng.uniform() < 0.15 ? "\n" : " ";
  }
  out.resize(chars);
  return out;
}

struct CharLmConfig {
  std::string corpus_path;  // empty: synthetic corpus
  std::size_t synthetic_chars = 400000;
  std::uint64_t corpus_seed = 0;
  double val_fraction = 0.1;
  std::size_t val_windows = 16;
};

class CharCorpus {
 public:
  explicit CharCorpus(const CharLmConfig& c) {
    std::string text;
    if (c.corpus_path.empty()) {
      text = synthetic_corpus(c.synthetic_chars, c.corpus_seed);
    } else {
      std::ifstream in(c.corpus_path, std::ios::binary);
      if (!in) throw std::runtime_error("cannot open corpus '" + c.corpus_path + "'");
      std::ostringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    std::array<bool, 256> seen{};
    for (unsigned char ch : text) seen[ch] = true;
    std::array<int, 256> id{};
    for (std::size_t b = 0; b < 256; ++b)
      if (seen[b]) {
        id[b] = static_cast<int>(vocab_.size());
        vocab_.push_back(static_cast<char>(b));
      }
    ids_.reserve(text.size());
    for (unsigned char ch : text) ids_.push_back(id[ch]);
    split_ = static_cast<std::size_t>(static_cast<double>(ids_.size()) * (1.0 - c.val_fraction));
    val_windows_ = c.val_windows;
  }

  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t size() const { return ids_.size(); }
  std::size_t train_size() const { return split_; }

  /// `batch` windows of seq+1 tokens from the training split, drawn from
  /// (seed, step).
  std::vector<std::vector<int>> train_batch(std::uint64_t seed, std::uint64_t step, std::size_t batch,
                                            std::size_t seq) const {
    if (split_ < seq + 2) throw std::invalid_argument("corpus too small for the sequence length");
    RngStream rng(seed, "charlm", step);
    std::vector<std::vector<int>> out(batch);
    for (auto& w : out) {
      const std::size_t s = rng.uniform_index(split_ - seq - 1);
      w.assign(ids_.begin() + static_cast<std::ptrdiff_t>(s), ids_.begin() + static_cast<std::ptrdiff_t>(s + seq + 1));
    }
    return out;
  }

  /// Evenly spaced windows over the validation split, the same for every run.
  std::vector<std::vector<int>> val_batch(std::size_t seq) const {
    const std::size_t n = ids_.size() - split_;
    if (n < seq + 2) throw std::invalid_argument("validation split too small for the sequence length");
    std::vector<std::vector<int>> out(val_windows_);
    const std::size_t span = n - seq - 1;
    for (std::size_t k = 0; k < val_windows_; ++k) {
      const std::size_t s = split_ + (val_windows_ > 1 ? span * k / (val_windows_ - 1) : 0);
      out[k].assign(ids_.begin() + static_cast<std::ptrdiff_t>(s), ids_.begin() + static_cast<std::ptrdiff_t>(s + seq + 1));
    }
    return out;
  }

 private:
  std::vector<char> vocab_;
  std::vector<int> ids_;
  std::size_t split_ = 0;
  std::size_t val_windows_ = 16;
};

}  // namespace fp4sim
