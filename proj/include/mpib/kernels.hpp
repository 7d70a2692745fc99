// SPDX-License-Identifier: Apache-2.0
/**
 * @file kernels.hpp
 * @brief Integer GEMV/GEMM over packed INT4 and INT8 operands plus a timing harness.
 */
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mpib/quant.hpp"

namespace mpib::kernels {

/// i32 accumulators acc[c] = sum_j codes[c,j] * x[j] for a packed [rows x cols] INT4 matrix.
std::vector<std::int32_t> gemv_int4_packed_acc(std::span<const quant::PackedWeightBlock> blocks,
                                               std::size_t rows, std::size_t cols,
                                               std::span<const std::int8_t> x_codes);

/// out[c] = scales[c] * x_scale * acc[c].
std::vector<double> gemv_int4_packed(std::span<const quant::PackedWeightBlock> blocks, std::size_t rows,
                                     std::size_t cols, std::span<const float> scales,
                                     std::span<const std::int8_t> x_codes, double x_scale);

/// C[m x n] i32 = A[m x k] * B[n x k]^T, both row-major INT8.
std::vector<std::int32_t> gemm_int8_acc(std::span<const std::int8_t> a, std::span<const std::int8_t> b,
                                        std::size_t m, std::size_t k, std::size_t n);

/// Real result C[i,j] = a_scale * b_scales[j] * acc[i,j]; b_scales per output channel (size n or 1).
std::vector<double> gemm_int8(std::span<const std::int8_t> a, std::span<const std::int8_t> b, std::size_t m,
                              std::size_t k, std::size_t n, double a_scale, std::span<const double> b_scales);

struct GemmSpec {
  std::size_t m = 32;  // output channels
  std::size_t k = 128;
  std::size_t n = 1;   // activation vectors
  int a_bits = 8;
  int b_bits = 4;      // weight precision: 4, 8 or 16
  std::uint64_t seed = 1;
};

struct BenchResult {
  std::string op_name;
  std::size_t iters = 0;
  double ns_per_call = 0.0;
  std::int64_t checksum = 0;
  std::size_t bytes_weights = 0;
};

/// Deterministic operands for a spec: weight codes [m x k] and activations [n x k].
struct BenchOperands {
  std::vector<std::int32_t> w_codes;
  std::vector<std::int8_t> x_codes;
  std::vector<float> w_fp;  // only for b_bits == 16
  std::vector<float> x_fp;
};
BenchOperands make_bench_operands(const GemmSpec& spec);

std::size_t weight_bytes(const GemmSpec& spec);

/// Runs the kernel selected by spec.b_bits iters times and reports the median.
/// Integer paths checksum the sum of i32 accumulators; the fp16 path checksums
/// sum(llround(out * 1024)).
BenchResult bench_kernel(const GemmSpec& spec, std::size_t iters);

void write_bench_csv(std::ostream& os, std::span<const GemmSpec> specs, std::span<const BenchResult> rows);

}  // namespace mpib::kernels
