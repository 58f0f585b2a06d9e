#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bitivf/matrix.hpp"
#include "bitivf/search.hpp"

namespace bitivf {

using IdLists = std::vector<std::vector<std::int32_t>>;

// TexMex vector files: each record is a little-endian int32 dimension d
// followed by d elements (f32, u8 or i32). All records share d. `limit` = 0
// reads everything.
FloatMatrix read_fvecs(const std::filesystem::path& path, std::size_t limit = 0);
FloatMatrix read_bvecs(const std::filesystem::path& path, std::size_t limit = 0);
IdLists read_ivecs(const std::filesystem::path& path, std::size_t limit = 0);

// Parsers over an in-memory image of the same formats.
FloatMatrix parse_fvecs(std::span<const std::uint8_t> bytes, std::size_t limit = 0);
FloatMatrix parse_bvecs(std::span<const std::uint8_t> bytes, std::size_t limit = 0);
IdLists parse_ivecs(std::span<const std::uint8_t> bytes, std::size_t limit = 0);

// Written to a temporary file and renamed into place.
void write_fvecs(const std::filesystem::path& path, const FloatMatrix& vectors);
void write_ivecs(const std::filesystem::path& path, const IdLists& lists);

enum class VectorFormat { kFvecs, kBvecs };

struct Dataset {
  FloatMatrix vectors;
  VectorFormat format = VectorFormat::kFvecs;
  std::optional<IdLists> ground_truth;
};

// Picks the parser from the extension (.bvecs, otherwise fvecs).
Dataset load_dataset(const std::filesystem::path& path, std::size_t limit = 0);

// Seeded isotropic Gaussian mixture. Centres are drawn once from `seed`;
// `sample` then draws points from the mixture with its own seed, so base and
// query sets share clusters.
class GaussianMixture {
 public:
  GaussianMixture(std::size_t dim, std::size_t clusters, std::uint64_t seed,
                  float centre_spread = 4.0f, float cluster_stddev = 1.0f);

  FloatMatrix sample(std::size_t n, std::uint64_t sample_seed) const;
  const FloatMatrix& centres() const { return centres_; }

 private:
  FloatMatrix centres_;
  float stddev_;
};

// Mean over queries of |returned top-k ∩ true top-k| / k.
double recall_at_k(std::span<const SearchResult> results,
                   const IdLists& ground_truth, std::size_t k);

// Exact k nearest neighbours by squared L2 (ties by id). A Gram-matrix pass
// shortlists candidates which are then re-scored with exact_distance.
IdLists brute_force_knn(const FloatMatrix& base, const FloatMatrix& queries,
                        std::size_t k);

IdLists to_id_lists(std::span<const SearchResult> results);

}  // namespace bitivf
