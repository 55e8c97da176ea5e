#pragma once

/**
 * Lossless arithmetic coding of responses under a ModelState.
 *
 * Symbols are the tokens of a response followed by EOS when the response ends
 * before the depth cut. Coding probabilities are the model's conditionals at
 * each prefix, quantized per row to integer frequencies summing to 2^32 by
 * largest-remainder rounding (every nonzero probability gets frequency >= 1).
 *
 * The coder is a 62-bit-state binary arithmetic coder with carry handling via
 * pending bits; it emits an exact bit count. Documented redundancy bound per
 * message: bits <= ceil(-log2 Q(z)) + R_total with
 * R_total = 2 (flush) + symbol_count * 1e-6 (quantization), valid for
 * conditionals >= ~1e-3 along the path. Decoding with the same ModelState
 * reproduces the response exactly.
 */

#include <array>
#include <cstdint>
#include <vector>

#include "tiltlab/token_tree.hpp"

namespace tiltlab {

struct CodedMessage {
  std::vector<std::uint8_t> bytes;  // bitstream, MSB-first within a byte
  std::uint64_t bit_length = 0;
  std::uint32_t symbol_count = 0;
  std::array<std::uint64_t, 2> model_id{0, 0};

  std::vector<std::uint8_t> to_bytes() const;
  static CodedMessage from_bytes(const std::vector<std::uint8_t>& data);
};

// Documented redundancy budget in bits for a message of `symbol_count` symbols.
inline double coder_redundancy_bound(std::uint32_t symbol_count) {
  return 2.0 + 1e-6 * static_cast<double>(symbol_count);
}

// Number of coded symbols for response z in a depth-d tree.
inline std::uint32_t coded_symbol_count(const Response& z, std::int32_t depth) {
  return static_cast<std::uint32_t>(z.size()) +
         (std::cmp_less(z.size(), depth) ? 1u : 0u);
}

CodedMessage encode(const Response& z, const ModelState& q);
Response decode(const CodedMessage& msg, const ModelState& q);

// Row quantization, exposed for the redundancy audit: frequencies sum to 2^32.
std::vector<std::uint64_t> quantize_row(std::span<const double> row);

}  // namespace tiltlab
