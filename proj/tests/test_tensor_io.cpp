// Copyright 2026 The fp4sim Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "fp4sim/tensor_io.hpp"

using namespace fp4sim;

namespace {
Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  RngStream rng(seed, "io");
  Matrix m(r, c);
  for (float& v : m.data) v = static_cast<float>(rng.normal() * 10);
  return m;
}
}  // namespace

// Property: serialize -> deserialize is the identity, over random shapes and
// every layout option.
TEST(Tjt2, QuantizedRoundTripProperty) {
  RngStream pick(99, "shapes");
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t r = 1 + pick.uniform_index(70), c = 1 + pick.uniform_index(300);
    const Matrix m = random_matrix(r, c, trial);
    QuantSpec spec;
    spec.orientation = static_cast<Orientation>(pick.uniform_index(3));
    spec.outer = static_cast<OuterGranularity>(pick.uniform_index(3));
    spec.element = pick.uniform_index(2) ? Format::E2M1 : Format::FP6_E3M2;
    const auto mode = pick.uniform_index(2) ? RoundingMode::Deterministic : RoundingMode::Stochastic;
    RngStream rng(trial, "q");
    QuantizedMatrix q = (trial % 7 == 0) ? quantize_mxfp4(m, mode, &rng) : quantize(m, spec, mode, &rng);
    const auto bytes = encode_tjt2(q);
    const auto back = decode_tjt2(bytes);
    ASSERT_TRUE(std::holds_alternative<QuantizedMatrix>(back));
    EXPECT_EQ(std::get<QuantizedMatrix>(back), q);
    EXPECT_EQ(encode_tjt2(std::get<QuantizedMatrix>(back)), bytes);
  }
}

TEST(Tjt2, DenseRoundTripAndHeader) {
  const Matrix m = random_matrix(3, 5, 1);
  const auto bytes = encode_tjt2(m);
  ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 8 + 15 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TJT2");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 0);  // kind
  EXPECT_EQ(bytes[9], 3);  // rows
  EXPECT_EQ(std::get<Matrix>(decode_tjt2(bytes)), m);
}

TEST(Tjt2, MalformedInputsReportOffsets) {
  auto bytes = encode_tjt2(quantize_double_block(random_matrix(4, 32, 2), Orientation::RowGroups_1x16,
                                                 OuterGranularity::Block_1x128, RoundingMode::Deterministic));
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  try {
    decode_tjt2(bad_magic);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto bad_kind = bytes;
  bad_kind[8] = 9;
  try {
    decode_tjt2(bad_kind);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_tjt2(truncated), ParseError);
  auto trailing = bytes;
  trailing.push_back(0);
  try {
    decode_tjt2(trailing);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
  }
}

TEST(Csv, RoundTripIsExact) {
  const Matrix m = random_matrix(7, 4, 3);
  EXPECT_EQ(from_csv(to_csv(m)), m);
}

TEST(Csv, RejectsRaggedAndGarbage) {
  EXPECT_THROW(from_csv("1,2\n3\n"), ParseError);
  try {
    from_csv("1,2\n3,abc\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 6u);
  }
  const Matrix m = from_csv("# comment\n1, 2\r\n3,4\n");
  EXPECT_EQ(m, Matrix(2, 2, std::vector<float>{1, 2, 3, 4}));
}
