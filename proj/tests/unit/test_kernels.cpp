// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "mpib/common.hpp"
#include "mpib/kernels.hpp"
#include "mpib/quant.hpp"

using namespace mpib;
using namespace mpib::kernels;

TEST(Kernels, Int4GemvMatchesNaive) {
  Rng rng(17);
  std::uniform_int_distribution<int> w4(-8, 7), x8(-128, 127);
  std::uniform_int_distribution<int> dim(1, 70);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t rows = dim(rng), cols = dim(rng);
    std::vector<std::int32_t> codes(rows * cols);
    for (auto& c : codes) c = w4(rng);
    std::vector<std::int8_t> x(cols);
    for (auto& v : x) v = static_cast<std::int8_t>(x8(rng));
    std::vector<float> scales(rows);
    for (std::size_t r = 0; r < rows; ++r) scales[r] = 0.01f * static_cast<float>(r + 1);
    const auto blocks = quant::pack_int4(codes, rows, cols);
    const auto acc = gemv_int4_packed_acc(blocks, rows, cols, x);
    const auto out = gemv_int4_packed(blocks, rows, cols, scales, x, 0.5);
    ASSERT_EQ(acc.size(), rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::int64_t want = 0;
      for (std::size_t c = 0; c < cols; ++c) want += codes[r * cols + c] * x[c];
      EXPECT_EQ(acc[r], want);
      EXPECT_NEAR(out[r], static_cast<double>(scales[r]) * 0.5 * static_cast<double>(want), 1e-9);
    }
  }
}

TEST(Kernels, Int8GemmMatchesNaive) {
  Rng rng(23);
  std::uniform_int_distribution<int> x8(-128, 127), dim(1, 40);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    std::vector<std::int8_t> a(m * k), b(n * k);
    for (auto& v : a) v = static_cast<std::int8_t>(x8(rng));
    for (auto& v : b) v = static_cast<std::int8_t>(x8(rng));
    std::vector<double> bs(n);
    for (std::size_t j = 0; j < n; ++j) bs[j] = 0.1 + 0.01 * static_cast<double>(j);
    const auto acc = gemm_int8_acc(a, b, m, k, n);
    const auto real = gemm_int8(a, b, m, k, n, 0.25, bs);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        std::int64_t want = 0;
        for (std::size_t t = 0; t < k; ++t) want += a[i * k + t] * b[j * k + t];
        EXPECT_EQ(acc[i * n + j], want);
        EXPECT_NEAR(real[i * n + j], 0.25 * bs[j] * static_cast<double>(want), 1e-9);
      }
    }
  }
}

TEST(Kernels, WeightBytesPerPrecision) {
  GemmSpec s;
  s.m = 32;
  s.k = 128;
  s.b_bits = 4;
  EXPECT_EQ(weight_bytes(s), 2048u);
  s.b_bits = 8;
  EXPECT_EQ(weight_bytes(s), 4096u);
  s.b_bits = 16;
  EXPECT_EQ(weight_bytes(s), 8192u);
}

TEST(Kernels, BenchIsDeterministic) {
  GemmSpec s;
  s.m = 16;
  s.k = 64;
  s.n = 2;
  for (int b : {4, 8, 16}) {
    s.b_bits = b;
    const auto r1 = bench_kernel(s, 3);
    const auto r2 = bench_kernel(s, 3);
    EXPECT_EQ(r1.checksum, r2.checksum);
    EXPECT_EQ(r1.iters, 3u);
    EXPECT_GT(r1.ns_per_call, 0.0);
    EXPECT_EQ(r1.bytes_weights, weight_bytes(s));
  }
  s.b_bits = 4;
  const auto ops = make_bench_operands(s);
  std::int64_t want = 0;
  for (std::size_t j = 0; j < s.n; ++j) {
    for (std::size_t r = 0; r < s.m; ++r) {
      for (std::size_t c = 0; c < s.k; ++c) want += ops.w_codes[r * s.k + c] * ops.x_codes[j * s.k + c];
    }
  }
  EXPECT_EQ(bench_kernel(s, 1).checksum, want);
}

TEST(Kernels, BenchCsvHasOneRowPerSpec) {
  std::vector<GemmSpec> specs(2);
  specs[1].b_bits = 8;
  std::vector<BenchResult> rows{bench_kernel(specs[0], 1), bench_kernel(specs[1], 1)};
  std::ostringstream os;
  write_bench_csv(os, specs, rows);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
