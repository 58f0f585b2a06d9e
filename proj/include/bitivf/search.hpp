#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "bitivf/index.hpp"
#include "bitivf/matrix.hpp"
#include "bitivf/quantizer.hpp"
#include "bitivf/raw_store.hpp"

namespace bitivf {

enum class Kernel { kSelect, kGather };
enum class Scheduling { kQueryLevel, kBlockLevel };
// kNone: every stage finishes for the whole batch before the next starts.
// kStage2: Top-k for a query starts once all of its blocks are scored.
// kStage3: re-ranking additionally starts once a query's Top-M is ready.
enum class Pipeline { kNone, kStage2, kStage3 };

std::string_view to_string(Kernel k);
std::string_view to_string(Scheduling s);
std::string_view to_string(Pipeline p);

struct SearchParams {
  std::size_t k = 10;
  std::size_t n_probe = 0;  // 0 selects ceil(5% of nList)
  std::size_t rerank_factor = 10;
  std::size_t batch_size = 64;
  std::size_t workers = 1;
  Kernel kernel = Kernel::kGather;
  Scheduling scheduling = Scheduling::kBlockLevel;
  bool pruning = true;
  Pipeline pipeline = Pipeline::kStage2;
  // When false the coarse Top-k is returned as-is (approximate distances);
  // a diagnostic for measuring what re-ranking adds.
  bool exact_rerank = true;

  std::size_t candidates() const noexcept { return k * rerank_factor; }
};

std::size_t auto_n_probe(std::size_t n_list);
std::size_t resolve_n_probe(const SearchParams& params, std::size_t n_list);

// Rank-equivalent approximate distance of one base vector.
struct CoarseHit {
  VectorId vector_id = 0;
  float approx_distance = 0.0f;

  friend bool operator==(const CoarseHit&, const CoarseHit&) = default;
};

// Strict weak order on (distance, id).
inline bool hit_before(const CoarseHit& a, const CoarseHit& b) noexcept {
  return a.approx_distance != b.approx_distance
             ? a.approx_distance < b.approx_distance
             : a.vector_id < b.vector_id;
}

struct Neighbor {
  VectorId id = 0;
  float distance = 0.0f;  // exact squared L2

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct SearchResult {
  std::size_t query_id = 0;
  std::vector<Neighbor> neighbors;  // ascending by (distance, id)

  friend bool operator==(const SearchResult&, const SearchResult&) = default;
};

struct BlockTask {
  std::size_t query_id = 0;    // position within the batch
  std::size_t probe_rank = 0;  // index into QueryContext::probes
  ClusterId cluster_id = 0;
  std::size_t block_index = 0;
  std::size_t sequence = 0;  // position in the flattened batch task list

  friend bool operator==(const BlockTask&, const BlockTask&) = default;
};

// Each round hands at most `workers` tasks out, one per worker; a round
// finishes before the next one starts.
struct Schedule {
  std::size_t workers = 0;
  std::vector<std::vector<BlockTask>> rounds;
  std::size_t total_tasks = 0;
  std::size_t idle_slots = 0;  // rounds * workers - total_tasks
};

using ProbeList = std::vector<std::pair<ClusterId, float>>;

// The n_probe nearest centroids of every query, ascending (ties by id).
std::vector<ProbeList> probe_clusters(const FloatMatrix& queries_rotated,
                                      const IvfRabitqIndex& index,
                                      std::size_t n_probe);

// Task list in query order, each query's tasks in probe order.
std::vector<BlockTask> flatten_tasks(std::span<const QueryContext> contexts,
                                     const IvfRabitqIndex& index);

Schedule schedule_blocks(std::span<const QueryContext> contexts,
                         const IvfRabitqIndex& index, Scheduling mode,
                         std::size_t workers);
// Same dispatch from per-query task counts alone; tasks carry only
// query_id and sequence.
Schedule schedule_counts(std::span<const std::size_t> tasks_per_query,
                         Scheduling mode, std::size_t workers);

float approx_distance(float scale, int inner_product, std::size_t dim,
                      float cx) noexcept;

// +/-1 inner product of two packed codes: D - 2 * popcount(a XOR b).
int code_inner_product(std::span<const std::uint8_t> a,
                       std::span<const std::uint8_t> b, std::size_t dim) noexcept;

// Direct XOR/popcount scoring of every vector in `block`, appended to `out`.
void coarse_select(std::span<const std::uint8_t> query_code, float l1_scale,
                   const IndexBlock& block, std::size_t dim,
                   std::vector<CoarseHit>& out);
std::vector<CoarseHit> coarse_select(std::span<const std::uint8_t> query_code,
                                     float l1_scale, const IndexBlock& block,
                                     std::size_t dim);

// Per-nibble lookup table: entry (g, p) is the +/-1 inner product of the
// query's 4-dimension group g with nibble pattern p. Dimensions past D are
// zero bits on both sides and add `pad` to every sum.
struct NibbleLut {
  std::size_t dim = 0;
  std::size_t groups = 0;
  int pad = 0;
  std::vector<std::int8_t> table;  // groups x 16

  int at(std::size_t group, unsigned pattern) const noexcept {
    return table[group * 16 + pattern];
  }
  int inner_product(std::span<const std::uint8_t> code) const noexcept;
};

NibbleLut build_lut(std::span<const std::uint8_t> query_code, std::size_t dim);

void coarse_gather(const NibbleLut& lut, const IndexBlock& block,
                   float l1_scale, std::vector<CoarseHit>& out);
std::vector<CoarseHit> coarse_gather(const NibbleLut& lut,
                                     const IndexBlock& block, float l1_scale);

// Bounded max-heap over (distance, id) keeping the best `capacity` hits.
class TopkCollector {
 public:
  TopkCollector(std::size_t capacity, bool pruning);

  void push(const CoarseHit& hit);
  void push(std::span<const CoarseHit> hits) {
    for (const auto& h : hits) push(h);
  }
  // Ascending by (distance, id). Leaves the collector empty.
  std::vector<CoarseHit> take_sorted();

  std::uint64_t insertions() const noexcept { return insertions_; }
  std::uint64_t skipped() const noexcept { return skipped_; }

 private:
  std::size_t capacity_;
  bool pruning_;
  std::vector<CoarseHit> heap_;
  std::uint64_t insertions_ = 0;
  std::uint64_t skipped_ = 0;
};

struct TopkCounters {
  std::uint64_t insertions = 0;
  std::uint64_t skipped = 0;
};

// Exact top-M of `hits` by (distance, id). With pruning, a hit that does
// not beat the current worst retained hit is dropped before touching the
// heap; the output is the same either way.
std::vector<CoarseHit> topk_select(std::span<const CoarseHit> hits,
                                   std::size_t m, bool pruning,
                                   TopkCounters* counters = nullptr);

// Exact squared L2, accumulated in double.
float exact_distance(std::span<const float> a, std::span<const float> b) noexcept;

SearchResult rerank(std::span<const float> query_raw,
                    std::span<const CoarseHit> candidates,
                    const VectorSource& source, std::size_t k,
                    std::size_t query_id = 0);

struct SearchStats {
  std::size_t queries = 0;
  std::size_t batches = 0;
  std::size_t rounds = 0;
  std::size_t tasks = 0;
  std::size_t idle_slots = 0;
  std::uint64_t hits = 0;
  std::uint64_t heap_insertions = 0;
  std::uint64_t prune_skips = 0;
  // Wall time per stage, summed over batches. Overlapping stages each
  // count their own span.
  double probe_seconds = 0.0;
  double coarse_seconds = 0.0;
  double topk_seconds = 0.0;
  double rerank_seconds = 0.0;
  double total_seconds = 0.0;

  SearchStats& operator+=(const SearchStats& other);
};

// Rotate, probe, quantize, schedule, score, Top-M, re-rank; batch by batch.
// Results come back in query order and do not depend on kernel, scheduling,
// pipeline mode, pruning or worker count.
std::vector<SearchResult> search_batch(const IvfRabitqIndex& index,
                                       const VectorSource& source,
                                       const FloatMatrix& queries,
                                       const SearchParams& params,
                                       SearchStats* stats = nullptr);

// Every stage up to and including Top-M; no re-ranking.
std::vector<std::vector<CoarseHit>> coarse_candidates(
    const IvfRabitqIndex& index, const FloatMatrix& queries,
    const SearchParams& params, SearchStats* stats = nullptr);

}  // namespace bitivf
