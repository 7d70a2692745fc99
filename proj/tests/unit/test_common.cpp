// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mpib/common.hpp"

using namespace mpib;

TEST(Seeds, SameNameSameStream) {
  EXPECT_EQ(derive_seed(7, "alpha"), derive_seed(7, "alpha"));
  EXPECT_NE(derive_seed(7, "alpha"), derive_seed(7, "beta"));
  EXPECT_NE(derive_seed(7, "alpha"), derive_seed(8, "alpha"));
  Rng a = make_rng(3, "x"), b = make_rng(3, "x");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(Fnv, KnownVectors) {
  // Published FNV-1a 64-bit test vectors.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Half, KnownEncodings) {
  EXPECT_EQ(float_to_half(1.0f), 0x3C00);
  EXPECT_EQ(float_to_half(-2.0f), 0xC000);
  EXPECT_EQ(float_to_half(65504.0f), 0x7BFF);
  EXPECT_EQ(float_to_half(0.0f), 0x0000);
  EXPECT_EQ(float_to_half(std::numeric_limits<float>::infinity()), 0x7C00);
  EXPECT_EQ(float_to_half(1e6f), 0x7C00);  // overflow saturates to inf
  EXPECT_EQ(float_to_half(5.9604645e-8f), 0x0001);  // smallest subnormal
  // 1 + 2^-11 is a tie between 1 and 1 + 2^-10: round to even keeps 1.
  EXPECT_EQ(float_to_half(1.0f + std::ldexp(1.0f, -11)), 0x3C00);
  EXPECT_EQ(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)), 0x3C02);
  EXPECT_TRUE(std::isnan(half_to_float(0x7E00)));
}

TEST(Half, RoundTripAllFinite) {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const auto bits = static_cast<std::uint16_t>(h);
    if ((bits & 0x7C00) == 0x7C00 && (bits & 0x03FF)) continue;  // NaN payloads
    EXPECT_EQ(float_to_half(half_to_float(bits)), bits) << h;
  }
}

TEST(Binary, LittleEndianRoundTrip) {
  std::stringstream ss;
  write_magic(ss, "MPIB");
  write_u32_le(ss, 0x01020304u);
  write_u64_le(ss, 0x0102030405060708ULL);
  write_f32_le(ss, 1.5f);
  write_f64_le(ss, -2.25);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 4 + 8 + 4 + 8);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0x04);
  expect_magic(ss, "MPIB");
  EXPECT_EQ(read_u32_le(ss), 0x01020304u);
  EXPECT_EQ(read_u64_le(ss), 0x0102030405060708ULL);
  EXPECT_EQ(read_f32_le(ss), 1.5f);
  EXPECT_EQ(read_f64_le(ss), -2.25);
  std::stringstream bad("XXXX");
  EXPECT_THROW(expect_magic(bad, "MPIB"), Error);
}
