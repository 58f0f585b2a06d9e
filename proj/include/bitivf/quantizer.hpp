#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "bitivf/core_math.hpp"
#include "bitivf/matrix.hpp"

namespace bitivf {

using VectorId = std::uint64_t;
using ClusterId = std::uint32_t;

// D sign bits packed little-endian within each byte: dimension i lives in
// bit (i % 8) of byte (i / 8). Bit set encodes +1, clear encodes -1. Bits
// past D are zero.
using BitCode = std::vector<std::uint8_t>;

constexpr std::size_t code_bytes(std::size_t dim) noexcept {
  return (dim + 7) / 8;
}

// Sign code of (x - c); sign(0) maps to +1.
BitCode sign_code(std::span<const float> x, std::span<const float> c);

inline bool code_bit(std::span<const std::uint8_t> code, std::size_t i) noexcept {
  return ((code[i >> 3] >> (i & 7)) & 1u) != 0;
}

// One base vector's 1-bit code with its precomputed constants.
struct QuantizedEntry {
  BitCode code;
  float cx = 0.0f;           // |x_hat|^2 - c . x_hat
  float residual_l1 = 0.0f;  // |x_hat - c|_1
  VectorId vector_id = 0;

  friend bool operator==(const QuantizedEntry&, const QuantizedEntry&) = default;
};

struct ProbeContext {
  ClusterId cluster_id = 0;
  float centroid_distance = 0.0f;
  BitCode query_code;     // sign code of (q_hat - c)
  float l1_scale = 0.0f;  // |q_hat - c|_1
};

// A query quantized against each of its probed clusters, nearest first.
struct QueryContext {
  std::size_t query_id = 0;
  std::vector<ProbeContext> probes;
};

// `precomputed_sq_norm` is |x_hat|^2, which the caller may take from the
// unrotated vector since rotation preserves norms.
QuantizedEntry encode_residual(std::span<const float> rotated,
                               std::span<const float> centroid,
                               float precomputed_sq_norm, VectorId vector_id);

// Encodes raw (unrotated) vectors. Norms are taken from `raw` concurrently
// with the rotation; centroid dot products then run concurrently with sign
// extraction and L1 sums. Output order matches input order.
std::vector<QuantizedEntry> encode_batch(const FloatMatrix& raw,
                                         const RotationMatrix& p,
                                         std::span<const ClusterId> assignments,
                                         const Centroids& centroids,
                                         std::span<const VectorId> ids);

// `probed` pairs are (cluster id, centroid distance), in any order.
QueryContext quantize_query(std::span<const float> rotated_query,
                            std::span<const std::pair<ClusterId, float>> probed,
                            const Centroids& centroids, std::size_t query_id);

}  // namespace bitivf
