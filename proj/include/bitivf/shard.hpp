#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bitivf/index.hpp"
#include "bitivf/raw_store.hpp"
#include "bitivf/search.hpp"

namespace bitivf {

// S independent indexes that share one rotation and one centroid set. Within
// every cluster, shard list lengths differ by at most one.
struct ShardedIndex {
  std::vector<IvfRabitqIndex> shards;
  std::vector<std::uint32_t> shard_of;  // vector id -> shard

  std::size_t shard_count() const noexcept { return shards.size(); }
  std::uint64_t total_vectors() const noexcept;
};

struct ShardedBuild {
  ShardedIndex index;
  std::vector<RawStore> stores;  // per shard, ids ascending
};

// Trains rotation and centroids once, then deals each cluster's vectors
// round-robin across shards in id order. Shards encode concurrently.
// `shard_block_size` overrides config.block_size when non-zero.
ShardedBuild partition(const FloatMatrix& raw, const BuildConfig& config,
                       std::size_t shard_count, std::size_t shard_block_size = 0);

// Resolves ids through `shard_of` into the owning shard's store.
class ShardedSource final : public VectorSource {
 public:
  ShardedSource(const ShardedIndex& index, std::span<const RawStore> stores);
  std::size_t dim() const override;
  std::span<const float> fetch(VectorId id) const override;

 private:
  const ShardedIndex& index_;
  std::span<const RawStore> stores_;
};

// Every shard runs the coarse stages on the whole batch concurrently, keeping
// its own Top-M; the per-query union is re-ranked exactly.
std::vector<SearchResult> search_sharded(const ShardedIndex& index,
                                         std::span<const RawStore> stores,
                                         const FloatMatrix& queries,
                                         const SearchParams& params,
                                         SearchStats* stats = nullptr);

// Largest (max - min) per-cluster list length gap across shards.
std::size_t max_shard_imbalance(const ShardedIndex& index);

// Shard files are written next to the manifest as <stem>.shard<i>; the stem
// defaults to the manifest's file name. `extra_json` is an object merged
// into the manifest.
void save_sharded(const ShardedIndex& index,
                  const std::filesystem::path& manifest_path,
                  const std::string& extra_json = "{}",
                  std::string shard_stem = {});
struct LoadedShards {
  ShardedIndex index;
  std::string manifest_json;
};
LoadedShards load_sharded(const std::filesystem::path& manifest_path);

}  // namespace bitivf
