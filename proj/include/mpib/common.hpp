// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mpib {

/// Every recoverable failure in the library surfaces as an Error whose
/// message is the short diagnostic named by the operation contract
/// ("insufficient audio", "code overflow", ...).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Derives a substream seed from a root seed and a stream name (FNV-1a over
/// the name, mixed with splitmix64). Identical (root, name) pairs always give
/// the same stream.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name);
Rng make_rng(std::uint64_t root, std::string_view name);

std::uint64_t fnv1a64(std::string_view bytes);

// IEEE 754 binary16 conversion, round-to-nearest-even.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

// Little-endian binary helpers shared by the file formats.
void write_u32_le(std::ostream& os, std::uint32_t v);
void write_u64_le(std::ostream& os, std::uint64_t v);
void write_f32_le(std::ostream& os, float v);
void write_f64_le(std::ostream& os, double v);
std::uint32_t read_u32_le(std::istream& is);
std::uint64_t read_u64_le(std::istream& is);
float read_f32_le(std::istream& is);
double read_f64_le(std::istream& is);
void write_magic(std::ostream& os, std::string_view magic);
void expect_magic(std::istream& is, std::string_view magic);

}  // namespace mpib
