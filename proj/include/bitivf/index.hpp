#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bitivf/core_math.hpp"
#include "bitivf/matrix.hpp"
#include "bitivf/quantizer.hpp"

namespace bitivf {

// Fixed-capacity contiguous segment of one inverted list; the unit of work
// handed to distance workers.
struct IndexBlock {
  ClusterId cluster_id = 0;
  std::vector<std::uint8_t> codes;  // size() * code_bytes(dim), packed
  std::vector<float> cx;
  std::vector<float> residual_l1;
  std::vector<VectorId> vector_ids;

  std::size_t size() const noexcept { return vector_ids.size(); }

  std::span<const std::uint8_t> code(std::size_t i, std::size_t stride) const {
    return {codes.data() + i * stride, stride};
  }

  void append(const QuantizedEntry& entry);

  friend bool operator==(const IndexBlock&, const IndexBlock&) = default;
};

using InvertedList = std::vector<IndexBlock>;

struct IvfRabitqIndex {
  std::size_t dim = 0;
  std::size_t n_list = 0;
  std::size_t block_size = 0;
  std::uint64_t total_vectors = 0;
  std::uint64_t seed = 0;
  RotationMatrix rotation;
  Centroids centroids;  // rotated space
  std::vector<InvertedList> lists;

  std::size_t code_stride() const noexcept { return code_bytes(dim); }
  std::size_t list_size(ClusterId c) const;

  // Appends to the last block of list `c`, opening a new block when full.
  void append(ClusterId c, const QuantizedEntry& entry);

  friend bool operator==(const IvfRabitqIndex&, const IvfRabitqIndex&) = default;
};

// Byte-level equality of every field, including float bit patterns.
bool identical(const IvfRabitqIndex& a, const IvfRabitqIndex& b);

struct BuildConfig {
  std::size_t n_list = 0;  // 0 selects ceil(sqrt(N))
  std::size_t block_size = 1024;
  std::size_t kmeans_max_iter = 25;
  std::uint64_t seed = 0;
  std::size_t assign_batch = 65536;
};

std::size_t auto_n_list(std::size_t n);
std::size_t resolve_n_list(const BuildConfig& config, std::size_t n);

// Rotation, centroids and the nearest-centroid assignment of every row;
// what the first two build phases produce.
struct CoarseModel {
  RotationMatrix rotation;
  Centroids centroids;
  std::vector<ClusterId> assignments;
};

CoarseModel train_coarse(const FloatMatrix& raw, const BuildConfig& config);

IvfRabitqIndex make_empty_index(const CoarseModel& model,
                                const BuildConfig& config);

// One-shot build. The raw vectors are not copied into the index; the caller
// keeps them for exact re-ranking. Vector ids are row numbers.
IvfRabitqIndex build(const FloatMatrix& raw, const BuildConfig& config);

// Little-endian "BIVF" v1 container with a trailing CRC32. Writes go to a
// temporary file that is renamed over `path`.
void save(const IvfRabitqIndex& index, const std::filesystem::path& path);
IvfRabitqIndex load(const std::filesystem::path& path);

std::string serialize(const IvfRabitqIndex& index);
IvfRabitqIndex deserialize(std::span<const std::uint8_t> bytes);

struct IndexStats {
  std::size_t n_list = 0;
  std::uint64_t total_vectors = 0;
  std::vector<std::uint64_t> list_sizes;
  std::vector<std::uint64_t> list_blocks;
  std::uint64_t total_blocks = 0;
  std::uint64_t code_bytes = 0;      // packed sign codes
  std::uint64_t constant_bytes = 0;  // cx + residual_l1
  std::uint64_t id_bytes = 0;
  std::uint64_t metadata_bytes = 0;  // rotation, centroids, block headers
  std::uint64_t memory_bytes = 0;    // sum of the four above
};

IndexStats stats(const IvfRabitqIndex& index);

}  // namespace bitivf
