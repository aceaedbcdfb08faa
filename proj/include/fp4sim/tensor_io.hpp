// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

// "TJT2" binary dumps and CSV for matrices.
//
// TJT2 layout, all integers little-endian:
//   bytes 0..3   magic 'T' 'J' 'T' '2'
//   u32          version (= 1)
//   u8           kind: 0 = dense binary32 matrix, 1 = QuantizedMatrix
//   u32 rows, u32 cols
//   kind 0: rows*cols binary32 values, row-major
//   kind 1: u8 orientation, u8 outer_granularity, u8 element_format,
//           u8 scale_format, u32 group,
//           u32 n, n code bytes; u32 n, n inner-scale codes;
//           u32 n, n binary32 outer scales

#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fp4sim/blockquant.hpp"
#include "fp4sim/matrix.hpp"

namespace fp4sim {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

inline constexpr std::uint32_t kTjt2Version = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const std::vector<std::uint8_t>& b) {
    u32(static_cast<std::uint32_t>(b.size()));
    buf_.insert(buf_.end(), b.begin(), b.end());
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  std::size_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) throw ParseError(std::string("truncated ") + what, pos_);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::vector<std::uint8_t> bytes(std::size_t expected, const char* what) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32(what);
    if (n != expected)
      throw ParseError(std::string(what) + " length " + std::to_string(n) + ", expected " +
                           std::to_string(expected), at);
    need(n, what);
    std::vector<std::uint8_t> out(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline void header(ByteWriter& w, std::uint8_t kind, std::size_t rows, std::size_t cols) {
  for (char c : {'T', 'J', 'T', '2'}) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kTjt2Version);
  w.u8(kind);
  w.u32(static_cast<std::uint32_t>(rows));
  w.u32(static_cast<std::uint32_t>(cols));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tjt2(const Matrix& m) {
  detail::ByteWriter w;
  detail::header(w, 0, m.rows, m.cols);
  for (float v : m.data) w.f32(v);
  return w.buffer();
}

inline std::vector<std::uint8_t> encode_tjt2(const QuantizedMatrix& q) {
  detail::ByteWriter w;
  detail::header(w, 1, q.rows, q.cols);
  w.u8(static_cast<std::uint8_t>(q.orientation));
  w.u8(static_cast<std::uint8_t>(q.outer));
  w.u8(static_cast<std::uint8_t>(q.element));
  w.u8(static_cast<std::uint8_t>(q.scale_format));
  w.u32(q.group);
  w.bytes(q.codes);
  w.bytes(q.inner_scales);
  w.u32(static_cast<std::uint32_t>(q.outer_scales.size()));
  for (float s : q.outer_scales) w.f32(s);
  return w.buffer();
}

using Tensor = std::variant<Matrix, QuantizedMatrix>;

inline Tensor decode_tjt2(const std::vector<std::uint8_t>& buf) {
  detail::ByteReader r(buf);
  r.need(4, "magic");
  if (std::memcmp(buf.data(), "TJT2", 4) != 0) throw ParseError("bad magic, expected 'TJT2'", 0);
  r.u32("magic");
  const std::size_t vat = r.offset();
  if (const auto v = r.u32("version"); v != kTjt2Version)
    throw ParseError("unsupported version " + std::to_string(v), vat);
  const std::size_t kat = r.offset();
  const std::uint8_t kind = r.u8("kind");
  const std::size_t rows = r.u32("rows");
  const std::size_t cols = r.u32("cols");
  if (kind == 0) {
    Matrix m(rows, cols);
    r.need(rows * cols * 4, "dense payload");
    for (float& v : m.data) v = r.f32("dense payload");
    if (r.offset() != buf.size()) throw ParseError("trailing bytes", r.offset());
    return m;
  }
  if (kind != 1) throw ParseError("unknown kind " + std::to_string(kind), kat);

  QuantizedMatrix q;
  q.rows = rows;
  q.cols = cols;
  std::size_t at = r.offset();
  const std::uint8_t o = r.u8("orientation");
  if (o > 2) throw ParseError("bad orientation", at);
  q.orientation = static_cast<Orientation>(o);
  at = r.offset();
  const std::uint8_t g = r.u8("outer granularity");
  if (g > 3) throw ParseError("bad outer granularity", at);
  q.outer = static_cast<OuterGranularity>(g);
  at = r.offset();
  const std::uint8_t ef = r.u8("element format");
  if (ef != static_cast<std::uint8_t>(Format::E2M1) && ef != static_cast<std::uint8_t>(Format::FP6_E3M2) &&
      ef != static_cast<std::uint8_t>(Format::FP6_E2M3))
    throw ParseError("bad element format", at);
  q.element = static_cast<Format>(ef);
  at = r.offset();
  const std::uint8_t sf = r.u8("scale format");
  if (sf != static_cast<std::uint8_t>(Format::E4M3) && sf != static_cast<std::uint8_t>(Format::E8M0))
    throw ParseError("bad scale format", at);
  q.scale_format = static_cast<Format>(sf);
  at = r.offset();
  q.group = r.u32("group");
  if (q.group == 0 || (q.outer == OuterGranularity::Block_1x128 && kOuterBlock % q.group != 0))
    throw ParseError("bad group size", at);

  const BlockGeometry geo(rows, cols, q.orientation, q.outer, q.group);
  const std::size_t n = rows * cols;
  q.codes = r.bytes(q.packed() ? (n + 1) / 2 : n, "codes");
  q.inner_scales = r.bytes(geo.inner_count(), "inner scales");
  at = r.offset();
  const std::uint32_t n_outer = r.u32("outer scales");
  if (n_outer != geo.outer_count()) throw ParseError("outer scale count mismatch", at);
  r.need(std::size_t{n_outer} * 4, "outer scales");
  q.outer_scales.resize(n_outer);
  for (float& s : q.outer_scales) s = r.f32("outer scales");
  if (r.offset() != buf.size()) throw ParseError("trailing bytes", r.offset());
  return q;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// One row per line, comma separated. Values round-trip exactly.
inline std::string to_csv(const Matrix& m) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (c) os << ',';
      os << m(r, c);
    }
    os << '\n';
  }
  return os.str();
}

inline Matrix from_csv(const std::string& text) {
  std::vector<float> values;
  std::size_t rows = 0, cols = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty() && line.front() != '#') {
      std::size_t n = 0, start = 0;
      for (;;) {
        const std::size_t comma = line.find(',', start);
        std::string_view field = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
        while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
        while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
        float v = 0.0f;
        const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
        if (res.ec != std::errc() || res.ptr != field.data() + field.size())
          throw ParseError("bad CSV number '" + std::string(field) + "'",
                           pos + static_cast<std::size_t>(field.data() - line.data()));
        values.push_back(v);
        ++n;
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      if (rows == 0) cols = n;
      else if (n != cols) throw ParseError("ragged CSV row " + std::to_string(rows + 1), pos);
      ++rows;
    }
    pos = eol + 1;
  }
  return Matrix(rows, cols, std::move(values));
}

/// Loads a dense matrix from a TJT2 dense dump or a CSV file.
inline Matrix load_dense(const std::string& path) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "TJT2", 4) == 0) {
    auto t = decode_tjt2(bytes);
    if (auto* m = std::get_if<Matrix>(&t)) return std::move(*m);
    return dequantize(std::get<QuantizedMatrix>(t));
  }
  return from_csv(std::string(bytes.begin(), bytes.end()));
}

}  // namespace fp4sim
