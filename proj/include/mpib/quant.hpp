// SPDX-License-Identifier: Apache-2.0
/**
 * @file quant.hpp
 * @brief Per-channel symmetric b-bit quantization, STE backward, INT4 block packing.
 */
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace mpib::quant {

inline constexpr int kPassthroughBits = 16;
inline constexpr int kBlockRows = 4;
inline constexpr int kBlockCols = 8;
inline constexpr int kBlockBytes = 16;

bool supported_bits(int bits);
int clip_lo_for(int bits);
int clip_hi_for(int bits);

struct QuantScheme {
  int bits = 4;
  std::vector<double> scales;  // one per output channel (row); size 1 for per-tensor
  int clip_lo = -8;
  int clip_hi = 7;
  int calibration_interval = 100;

  static QuantScheme make(int bits, std::vector<double> scales);
  bool passthrough() const { return bits == kPassthroughBits; }
  double scale_for_row(std::size_t r) const { return scales.size() == 1 ? scales[0] : scales[r]; }
};

/// Row-major integer codes of shape rows x cols with the scheme that produced them.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> codes;
  QuantScheme scheme;
};

struct QuantResult {
  QuantizedTensor q;
  std::vector<double> dequant;
};

struct PackedWeightBlock {
  std::array<std::uint8_t, kBlockBytes> payload{};
};

/// Scale of a symmetric quantizer that maps max|x| onto clip_hi.
double absmax_scale(double absmax, int bits);

/// One scale per row of a row-major [rows x cols] matrix.
QuantScheme calibrate_scales(std::span<const double> weights, std::size_t rows, std::size_t cols, int bits);

/// Half-away-from-zero rounding then clipping to [lo, hi].
std::int32_t quantize_value(double w, double scale, int lo, int hi);

/// Quantizes a row-major [rows x cols] array; rows map to scheme channels.
QuantResult quantize_ste(std::span<const double> w, std::size_t rows, std::size_t cols,
                         const QuantScheme& scheme);

/// Saturated STE: upstream passes where clip_lo <= w/s <= clip_hi, zero elsewhere.
std::vector<double> ste_backward(std::span<const double> upstream, std::span<const double> w,
                                 std::size_t rows, std::size_t cols, const QuantScheme& scheme);

std::size_t packed_int4_bytes(std::size_t rows, std::size_t cols);

/// Packs signed 4-bit codes into 4x8 blocks (row-blocks outer, col-blocks inner).
/// Inside a block byte index = r*4 + c/2; even column in the low nibble.
std::vector<PackedWeightBlock> pack_int4(std::span<const std::int32_t> codes, std::size_t rows,
                                         std::size_t cols);
/// Returns the padded code matrix [ceil4(rows) x ceil8(cols)].
std::vector<std::int32_t> unpack_int4(std::span<const PackedWeightBlock> blocks, std::size_t rows,
                                      std::size_t cols);

inline std::int32_t sign_extend4(std::uint8_t nibble) {
  return static_cast<std::int32_t>(static_cast<std::int8_t>(static_cast<std::uint8_t>(nibble << 4)) >> 4);
}

/// Clamps INT8 codes into the 6-bit range [-32, 31].
std::vector<std::int32_t> emulate_int6(std::span<const std::int32_t> codes8);

struct PackedInt4Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<PackedWeightBlock> blocks;
  std::vector<float> scales;
};

void write_mpq4(const std::filesystem::path& path, const PackedInt4Matrix& m);
PackedInt4Matrix read_mpq4(const std::filesystem::path& path);
void write_mpq4(std::ostream& os, const PackedInt4Matrix& m);
PackedInt4Matrix read_mpq4(std::istream& is);

}  // namespace mpib::quant
