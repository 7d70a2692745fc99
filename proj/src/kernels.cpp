// SPDX-License-Identifier: Apache-2.0
#include "mpib/kernels.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "mpib/common.hpp"

namespace mpib::kernels {

std::vector<std::int32_t> gemv_int4_packed_acc(std::span<const quant::PackedWeightBlock> blocks,
                                               std::size_t rows, std::size_t cols,
                                               std::span<const std::int8_t> x_codes) {
  const std::size_t rb = (rows + quant::kBlockRows - 1) / quant::kBlockRows;
  const std::size_t cb = (cols + quant::kBlockCols - 1) / quant::kBlockCols;
  if (blocks.size() != rb * cb || x_codes.size() != cols) throw Error("shape error");

  std::vector<std::int32_t> acc(rows, 0);
  std::int8_t xpad[quant::kBlockCols];
  for (std::size_t bj = 0; bj < cb; ++bj) {
    const std::size_t c0 = bj * quant::kBlockCols;
    for (int c = 0; c < quant::kBlockCols; ++c) {
      xpad[c] = (c0 + c < cols) ? x_codes[c0 + c] : std::int8_t{0};
    }
    for (std::size_t bi = 0; bi < rb; ++bi) {
      const auto& p = blocks[bi * cb + bj].payload;
      for (int r = 0; r < quant::kBlockRows; ++r) {
        const std::size_t gr = bi * quant::kBlockRows + r;
        if (gr >= rows) break;
        std::int32_t s = 0;
        for (int h = 0; h < 4; ++h) {
          const std::uint8_t byte = p[r * 4 + h];
          s += quant::sign_extend4(byte & 0x0f) * xpad[2 * h];
          s += quant::sign_extend4(byte >> 4) * xpad[2 * h + 1];
        }
        acc[gr] += s;
      }
    }
  }
  return acc;
}

std::vector<double> gemv_int4_packed(std::span<const quant::PackedWeightBlock> blocks, std::size_t rows,
                                     std::size_t cols, std::span<const float> scales,
                                     std::span<const std::int8_t> x_codes, double x_scale) {
  if (scales.size() != rows) throw Error("shape error");
  const auto acc = gemv_int4_packed_acc(blocks, rows, cols, x_codes);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = static_cast<double>(scales[r]) * x_scale * static_cast<double>(acc[r]);
  }
  return out;
}

std::vector<std::int32_t> gemm_int8_acc(std::span<const std::int8_t> a, std::span<const std::int8_t> b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  if (a.size() != m * k || b.size() != n * k) throw Error("shape error");
  std::vector<std::int32_t> c(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::int8_t* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const std::int8_t* bj = b.data() + j * k;
      std::int32_t s = 0;
      for (std::size_t t = 0; t < k; ++t) s += static_cast<std::int32_t>(ai[t]) * bj[t];
      c[i * n + j] = s;
    }
  }
  return c;
}

std::vector<double> gemm_int8(std::span<const std::int8_t> a, std::span<const std::int8_t> b, std::size_t m,
                              std::size_t k, std::size_t n, double a_scale, std::span<const double> b_scales) {
  if (b_scales.size() != n && b_scales.size() != 1) throw Error("shape error");
  const auto acc = gemm_int8_acc(a, b, m, k, n);
  std::vector<double> c(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double bs = b_scales.size() == 1 ? b_scales[0] : b_scales[j];
      c[i * n + j] = a_scale * bs * static_cast<double>(acc[i * n + j]);
    }
  }
  return c;
}

BenchOperands make_bench_operands(const GemmSpec& spec) {
  auto rng = make_rng(spec.seed, "bench-operands");
  BenchOperands ops;
  const int wlo = spec.b_bits == 4 ? -8 : -127;
  const int whi = spec.b_bits == 4 ? 7 : 127;
  std::uniform_int_distribution<int> wd(wlo, whi);
  std::uniform_int_distribution<int> xd(-127, 127);
  ops.w_codes.resize(spec.m * spec.k);
  for (auto& w : ops.w_codes) w = wd(rng);
  ops.x_codes.resize(spec.n * spec.k);
  for (auto& x : ops.x_codes) x = static_cast<std::int8_t>(xd(rng));
  if (spec.b_bits == 16) {
    ops.w_fp.resize(ops.w_codes.size());
    for (std::size_t i = 0; i < ops.w_fp.size(); ++i) {
      ops.w_fp[i] = half_to_float(float_to_half(static_cast<float>(ops.w_codes[i]) / 127.0f));
    }
    ops.x_fp.resize(ops.x_codes.size());
    for (std::size_t i = 0; i < ops.x_fp.size(); ++i) ops.x_fp[i] = static_cast<float>(ops.x_codes[i]) / 127.0f;
  }
  return ops;
}

std::size_t weight_bytes(const GemmSpec& spec) {
  const std::size_t params = spec.m * spec.k;
  switch (spec.b_bits) {
    case 4: return params / 2 + (params % 2);
    case 8: return params;
    case 16: return 2 * params;
    default: throw Error("unsupported precision");
  }
}

BenchResult bench_kernel(const GemmSpec& spec, std::size_t iters) {
  if (iters < 1) throw Error("iters must be >= 1");
  const auto ops = make_bench_operands(spec);
  BenchResult res;
  res.iters = iters;
  res.bytes_weights = weight_bytes(spec);
  std::vector<double> times;
  times.reserve(iters);
  using clock = std::chrono::steady_clock;

  if (spec.b_bits == 4) {
    res.op_name = spec.n == 1 ? "gemv_int4_packed" : "gemm_int4_packed";
    const auto blocks = quant::pack_int4(ops.w_codes, spec.m, spec.k);
    std::vector<std::int32_t> acc;
    for (std::size_t it = 0; it < iters; ++it) {
      const auto t0 = clock::now();
      std::int64_t cs = 0;
      for (std::size_t v = 0; v < spec.n; ++v) {
        acc = gemv_int4_packed_acc(blocks, spec.m, spec.k,
                                   std::span<const std::int8_t>(ops.x_codes.data() + v * spec.k, spec.k));
        for (auto a : acc) cs += a;
      }
      const auto t1 = clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      res.checksum = cs;
    }
  } else if (spec.b_bits == 8) {
    res.op_name = "gemm_int8";
    std::vector<std::int8_t> w8(ops.w_codes.begin(), ops.w_codes.end());
    for (std::size_t it = 0; it < iters; ++it) {
      const auto t0 = clock::now();
      const auto acc = gemm_int8_acc(ops.x_codes, w8, spec.n, spec.k, spec.m);
      const auto t1 = clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      std::int64_t cs = 0;
      for (auto a : acc) cs += a;
      res.checksum = cs;
    }
  } else if (spec.b_bits == 16) {
    res.op_name = "gemm_fp16";
    std::vector<std::uint16_t> wh(ops.w_fp.size());
    for (std::size_t i = 0; i < wh.size(); ++i) wh[i] = float_to_half(ops.w_fp[i]);
    std::vector<float> out(spec.n * spec.m);
    for (std::size_t it = 0; it < iters; ++it) {
      const auto t0 = clock::now();
      for (std::size_t v = 0; v < spec.n; ++v) {
        const float* x = ops.x_fp.data() + v * spec.k;
        for (std::size_t r = 0; r < spec.m; ++r) {
          const std::uint16_t* w = wh.data() + r * spec.k;
          float s = 0.0f;
          for (std::size_t t = 0; t < spec.k; ++t) s += half_to_float(w[t]) * x[t];
          out[v * spec.m + r] = s;
        }
      }
      const auto t1 = clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      std::int64_t cs = 0;
      for (float o : out) cs += std::llround(static_cast<double>(o) * 1024.0);
      res.checksum = cs;
    }
  } else {
    throw Error("unsupported precision");
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
  res.ns_per_call = times[times.size() / 2];
  return res;
}

void write_bench_csv(std::ostream& os, std::span<const GemmSpec> specs, std::span<const BenchResult> rows) {
  os << "op,m,k,n,bits,ns_per_call,bytes_weights\n";
  for (std::size_t i = 0; i < rows.size() && i < specs.size(); ++i) {
    const auto& s = specs[i];
    const auto& r = rows[i];
    char ns[64];
    std::snprintf(ns, sizeof(ns), "%.6g", r.ns_per_call);
    os << r.op_name << ',' << s.m << ',' << s.k << ',' << s.n << ',' << s.b_bits << ',' << ns << ','
       << r.bytes_weights << '\n';
  }
}

}  // namespace mpib::kernels
