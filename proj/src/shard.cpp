#include "bitivf/shard.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>

#include "bitivf/error.hpp"

namespace bitivf {

std::uint64_t ShardedIndex::total_vectors() const noexcept {
  std::uint64_t n = 0;
  for (const auto& s : shards) n += s.total_vectors;
  return n;
}

ShardedBuild partition(const FloatMatrix& raw, const BuildConfig& config,
                       std::size_t shard_count, std::size_t shard_block_size) {
  if (shard_count == 0) throw InvalidArgument("partition: shard count must be >= 1");
  const CoarseModel model = train_coarse(raw, config);
  const std::size_t n = raw.rows();

  ShardedBuild out;
  out.index.shard_of.resize(n);
  std::vector<std::size_t> dealt(model.centroids.n_list, 0);
  std::vector<std::vector<std::size_t>> rows(shard_count);
  for (std::size_t i = 0; i < n; ++i) {
    const auto shard =
        static_cast<std::uint32_t>(dealt[model.assignments[i]]++ % shard_count);
    out.index.shard_of[i] = shard;
    rows[shard].push_back(i);
  }

  BuildConfig shard_config = config;
  if (shard_block_size != 0) shard_config.block_size = shard_block_size;
  out.index.shards.resize(shard_count);
  out.stores.resize(shard_count);

  std::vector<std::exception_ptr> errors(shard_count);
  {
    std::vector<std::jthread> workers;
    for (std::size_t s = 0; s < shard_count; ++s) {
      workers.emplace_back([&, s] {
        try {
          const auto& mine = rows[s];
          IvfRabitqIndex index = make_empty_index(model, shard_config);
          const std::size_t batch = std::max<std::size_t>(config.assign_batch, 1);
          std::vector<VectorId> ids;
          std::vector<ClusterId> labels;
          for (std::size_t begin = 0; begin < mine.size(); begin += batch) {
            const std::size_t count = std::min(batch, mine.size() - begin);
            const std::span<const std::size_t> chunk(mine.data() + begin, count);
            ids.assign(chunk.begin(), chunk.end());
            labels.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
              labels[i] = model.assignments[chunk[i]];
            }
            const auto entries = encode_batch(raw.gather_rows(chunk),
                                              model.rotation, labels,
                                              model.centroids, ids);
            for (std::size_t i = 0; i < count; ++i) index.append(labels[i], entries[i]);
          }
          out.index.shards[s] = std::move(index);
          out.stores[s] = RawStore(raw.gather_rows(mine),
                                   std::vector<VectorId>(mine.begin(), mine.end()));
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

ShardedSource::ShardedSource(const ShardedIndex& index,
                             std::span<const RawStore> stores)
    : index_(index), stores_(stores) {
  if (stores_.size() != index_.shard_count()) {
    throw InvalidArgument("ShardedSource: store count != shard count");
  }
}

std::size_t ShardedSource::dim() const {
  return stores_.empty() ? 0 : stores_.front().dim();
}

std::span<const float> ShardedSource::fetch(VectorId id) const {
  if (id >= index_.shard_of.size()) {
    throw InternalError("sharded store has no vector " + std::to_string(id));
  }
  return stores_[index_.shard_of[id]].fetch(id);
}

std::vector<SearchResult> search_sharded(const ShardedIndex& index,
                                         std::span<const RawStore> stores,
                                         const FloatMatrix& queries,
                                         const SearchParams& params,
                                         SearchStats* stats) {
  if (index.shard_count() == 0) throw InvalidArgument("search_sharded: no shards");
  const ShardedSource source(index, stores);
  const std::size_t s_count = index.shard_count();

  std::vector<std::vector<std::vector<CoarseHit>>> per_shard(s_count);
  std::vector<SearchStats> shard_stats(s_count);
  std::vector<std::exception_ptr> errors(s_count);
  {
    std::vector<std::jthread> workers;
    for (std::size_t s = 0; s < s_count; ++s) {
      workers.emplace_back([&, s] {
        try {
          per_shard[s] = coarse_candidates(index.shards[s], queries, params,
                                           &shard_stats[s]);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  SearchStats merged;
  for (const auto& st : shard_stats) {
    SearchStats copy = st;
    copy.queries = 0;
    copy.batches = 0;
    merged += copy;
  }
  merged.queries = queries.rows();
  merged.batches = shard_stats.front().batches;

  const auto start = std::chrono::steady_clock::now();
  std::vector<SearchResult> results(queries.rows());
  std::vector<CoarseHit> merged_hits;
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    merged_hits.clear();
    for (std::size_t s = 0; s < s_count; ++s) {
      const auto& hits = per_shard[s][q];
      merged_hits.insert(merged_hits.end(), hits.begin(), hits.end());
    }
    if (params.exact_rerank) {
      results[q] = rerank(queries.row(q), merged_hits, source, params.k, q);
    } else {
      std::sort(merged_hits.begin(), merged_hits.end(), hit_before);
      results[q].query_id = q;
      const std::size_t n = std::min(params.k, merged_hits.size());
      for (std::size_t i = 0; i < n; ++i) {
        results[q].neighbors.push_back(
            {merged_hits[i].vector_id, merged_hits[i].approx_distance});
      }
    }
  }
  const double rerank_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  merged.rerank_seconds += rerank_time;
  merged.total_seconds += rerank_time;
  if (stats != nullptr) *stats += merged;
  return results;
}

std::size_t max_shard_imbalance(const ShardedIndex& index) {
  if (index.shards.empty()) return 0;
  std::size_t worst = 0;
  const std::size_t n_list = index.shards.front().n_list;
  for (ClusterId c = 0; c < n_list; ++c) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& shard : index.shards) {
      const std::size_t len = shard.list_size(c);
      lo = std::min(lo, len);
      hi = std::max(hi, len);
    }
    worst = std::max(worst, hi - lo);
  }
  return worst;
}

void save_sharded(const ShardedIndex& index,
                  const std::filesystem::path& manifest_path,
                  const std::string& extra_json, std::string shard_stem) {
  if (index.shards.empty()) throw InvalidArgument("save_sharded: no shards");
  nlohmann::json manifest = nlohmann::json::parse(extra_json);
  const auto& first = index.shards.front();
  manifest["S"] = index.shard_count();
  manifest["seed"] = first.seed;
  manifest["nList"] = first.n_list;
  manifest["D"] = first.dim;
  manifest["N"] = index.total_vectors();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t s = 0; s < index.shard_count(); ++s) {
    std::filesystem::path file =
        shard_stem.empty() ? manifest_path.filename().string() : shard_stem;
    file += ".shard" + std::to_string(s);
    save(index.shards[s], manifest_path.parent_path() / file);
    files.push_back(file.string());
  }
  manifest["shards"] = files;

  auto tmp = manifest_path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, manifest_path);
}

LoadedShards load_sharded(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptIndex("manifest is not valid JSON: " + std::string(e.what()));
  }
  std::vector<std::string> files;
  std::uint64_t n = 0;
  try {
    files = manifest.at("shards").get<std::vector<std::string>>();
    if (files.size() != manifest.at("S").get<std::size_t>()) {
      throw CorruptIndex("manifest S disagrees with shard file list");
    }
    n = manifest.at("N").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptIndex("manifest is missing fields: " + std::string(e.what()));
  }
  if (files.empty()) throw CorruptIndex("manifest lists no shards");
  LoadedShards out;
  for (const auto& f : files) {
    out.index.shards.push_back(load(manifest_path.parent_path() / f));
    const auto& first = out.index.shards.front();
    const auto& last = out.index.shards.back();
    if (!(last.rotation.matrix == first.rotation.matrix) ||
        !(last.centroids.matrix == first.centroids.matrix)) {
      throw CorruptIndex("shards do not share rotation and centroids");
    }
  }
  if (out.index.total_vectors() != n) {
    throw CorruptIndex("manifest N disagrees with shard contents");
  }
  out.index.shard_of.assign(n, UINT32_MAX);
  for (std::size_t s = 0; s < out.index.shards.size(); ++s) {
    for (const auto& list : out.index.shards[s].lists) {
      for (const auto& block : list) {
        for (VectorId id : block.vector_ids) {
          if (id >= n || out.index.shard_of[id] != UINT32_MAX) {
            throw CorruptIndex("shard vector ids are not a partition of [0, N)");
          }
          out.index.shard_of[id] = static_cast<std::uint32_t>(s);
        }
      }
    }
  }
  out.manifest_json = manifest.dump();
  return out;
}

}  // namespace bitivf
