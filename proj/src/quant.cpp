// SPDX-License-Identifier: Apache-2.0
#include "mpib/quant.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>

#include "mpib/common.hpp"

namespace mpib::quant {

bool supported_bits(int bits) { return (bits >= 2 && bits <= 8) || bits == kPassthroughBits; }

int clip_lo_for(int bits) { return -(1 << (bits - 1)); }
int clip_hi_for(int bits) { return (1 << (bits - 1)) - 1; }

QuantScheme QuantScheme::make(int bits, std::vector<double> scales) {
  if (!supported_bits(bits)) throw Error("unsupported precision");
  QuantScheme s;
  s.bits = bits;
  s.scales = std::move(scales);
  if (bits != kPassthroughBits) {
    s.clip_lo = clip_lo_for(bits);
    s.clip_hi = clip_hi_for(bits);
    for (double& v : s.scales) {
      if (!(v > 0.0)) v = FLT_MIN;
    }
  } else {
    s.clip_lo = clip_lo_for(16);
    s.clip_hi = clip_hi_for(16);
  }
  return s;
}

double absmax_scale(double absmax, int bits) {
  const double s = absmax / clip_hi_for(bits);
  return s > 0.0 ? s : FLT_MIN;
}

QuantScheme calibrate_scales(std::span<const double> weights, std::size_t rows, std::size_t cols, int bits) {
  if (rows == 0 || cols == 0 || weights.size() != rows * cols) throw Error("empty weights");
  if (bits < 2 || bits > 8) throw Error("unsupported precision");
  std::vector<double> scales(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < cols; ++c) m = std::max(m, std::abs(weights[r * cols + c]));
    scales[r] = absmax_scale(m, bits);
  }
  return QuantScheme::make(bits, std::move(scales));
}

std::int32_t quantize_value(double w, double scale, int lo, int hi) {
  const double q = std::round(w / scale);
  if (q < lo) return lo;
  if (q > hi) return hi;
  return static_cast<std::int32_t>(q);
}

QuantResult quantize_ste(std::span<const double> w, std::size_t rows, std::size_t cols,
                         const QuantScheme& scheme) {
  if (w.size() != rows * cols) throw Error("shape error");
  QuantResult res;
  res.q.rows = rows;
  res.q.cols = cols;
  res.q.scheme = scheme;
  res.dequant.assign(w.begin(), w.end());
  if (scheme.passthrough()) return res;
  res.q.codes.resize(w.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = scheme.scale_for_row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const auto code = quantize_value(w[i], s, scheme.clip_lo, scheme.clip_hi);
      res.q.codes[i] = code;
      res.dequant[i] = code * s;
    }
  }
  return res;
}

std::vector<double> ste_backward(std::span<const double> upstream, std::span<const double> w,
                                 std::size_t rows, std::size_t cols, const QuantScheme& scheme) {
  if (upstream.size() != w.size() || w.size() != rows * cols) throw Error("shape error");
  std::vector<double> g(upstream.begin(), upstream.end());
  if (scheme.passthrough()) return g;
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = scheme.scale_for_row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double t = w[i] / s;
      if (t < scheme.clip_lo || t > scheme.clip_hi) g[i] = 0.0;
    }
  }
  return g;
}

std::size_t packed_int4_bytes(std::size_t rows, std::size_t cols) {
  return ((rows + kBlockRows - 1) / kBlockRows) * ((cols + kBlockCols - 1) / kBlockCols) * kBlockBytes;
}

std::vector<PackedWeightBlock> pack_int4(std::span<const std::int32_t> codes, std::size_t rows,
                                         std::size_t cols) {
  if (codes.size() != rows * cols) throw Error("shape error");
  for (auto c : codes) {
    if (c < -8 || c > 7) throw Error("code overflow");
  }
  const std::size_t rb = (rows + kBlockRows - 1) / kBlockRows;
  const std::size_t cb = (cols + kBlockCols - 1) / kBlockCols;
  std::vector<PackedWeightBlock> blocks(rb * cb);
  for (std::size_t bi = 0; bi < rb; ++bi) {
    for (std::size_t bj = 0; bj < cb; ++bj) {
      auto& blk = blocks[bi * cb + bj];
      for (int r = 0; r < kBlockRows; ++r) {
        for (int c = 0; c < kBlockCols; ++c) {
          const std::size_t gr = bi * kBlockRows + r;
          const std::size_t gc = bj * kBlockCols + c;
          std::int32_t code = 0;
          if (gr < rows && gc < cols) code = codes[gr * cols + gc];
          const auto nib = static_cast<std::uint8_t>(code & 0xf);
          auto& byte = blk.payload[r * 4 + c / 2];
          if (c % 2 == 0) {
            byte = static_cast<std::uint8_t>((byte & 0xf0) | nib);
          } else {
            byte = static_cast<std::uint8_t>((byte & 0x0f) | (nib << 4));
          }
        }
      }
    }
  }
  return blocks;
}

std::vector<std::int32_t> unpack_int4(std::span<const PackedWeightBlock> blocks, std::size_t rows,
                                      std::size_t cols) {
  const std::size_t rb = (rows + kBlockRows - 1) / kBlockRows;
  const std::size_t cb = (cols + kBlockCols - 1) / kBlockCols;
  if (blocks.size() != rb * cb) throw Error("shape error");
  const std::size_t pr = rb * kBlockRows, pc = cb * kBlockCols;
  std::vector<std::int32_t> out(pr * pc);
  for (std::size_t bi = 0; bi < rb; ++bi) {
    for (std::size_t bj = 0; bj < cb; ++bj) {
      const auto& blk = blocks[bi * cb + bj];
      for (int r = 0; r < kBlockRows; ++r) {
        for (int c = 0; c < kBlockCols; ++c) {
          const std::uint8_t byte = blk.payload[r * 4 + c / 2];
          const std::uint8_t nib = (c % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
          out[(bi * kBlockRows + r) * pc + bj * kBlockCols + c] = sign_extend4(nib);
        }
      }
    }
  }
  return out;
}

std::vector<std::int32_t> emulate_int6(std::span<const std::int32_t> codes8) {
  std::vector<std::int32_t> out(codes8.size());
  for (std::size_t i = 0; i < codes8.size(); ++i) out[i] = std::clamp(codes8[i], -32, 31);
  return out;
}

void write_mpq4(std::ostream& os, const PackedInt4Matrix& m) {
  write_magic(os, "MPQ4");
  write_u32_le(os, static_cast<std::uint32_t>(m.rows));
  write_u32_le(os, static_cast<std::uint32_t>(m.cols));
  for (const auto& b : m.blocks) {
    os.write(reinterpret_cast<const char*>(b.payload.data()), kBlockBytes);
  }
  for (float s : m.scales) write_f32_le(os, s);
}

PackedInt4Matrix read_mpq4(std::istream& is) {
  expect_magic(is, "MPQ4");
  PackedInt4Matrix m;
  m.rows = read_u32_le(is);
  m.cols = read_u32_le(is);
  const std::size_t n_blocks = packed_int4_bytes(m.rows, m.cols) / kBlockBytes;
  m.blocks.resize(n_blocks);
  for (auto& b : m.blocks) {
    is.read(reinterpret_cast<char*>(b.payload.data()), kBlockBytes);
    if (is.gcount() != kBlockBytes) throw Error("truncated file");
  }
  m.scales.resize(m.rows);
  for (float& s : m.scales) s = read_f32_le(is);
  return m;
}

void write_mpq4(const std::filesystem::path& path, const PackedInt4Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string());
  write_mpq4(os, m);
}

PackedInt4Matrix read_mpq4(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_mpq4(is);
}

}  // namespace mpib::quant
