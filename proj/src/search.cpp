#include "bitivf/search.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <bit>
#include <chrono>
#include <cstring>
#include <exception>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "bitivf/error.hpp"

namespace bitivf {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

Schedule make_schedule(std::vector<BlockTask> tasks, Scheduling mode,
                       std::size_t workers) {
  if (workers == 0) throw InvalidArgument("schedule: workers must be >= 1");
  Schedule s;
  s.workers = workers;
  s.total_tasks = tasks.size();
  std::size_t i = 0;
  while (i < tasks.size()) {
    // Query-level dispatch never lets a round span two queries.
    std::size_t end = std::min(i + workers, tasks.size());
    if (mode == Scheduling::kQueryLevel) {
      std::size_t j = i;
      while (j < end && tasks[j].query_id == tasks[i].query_id) ++j;
      end = j;
    }
    s.rounds.emplace_back(tasks.begin() + static_cast<std::ptrdiff_t>(i),
                          tasks.begin() + static_cast<std::ptrdiff_t>(end));
    i = end;
  }
  s.idle_slots = s.rounds.size() * workers - s.total_tasks;
  return s;
}

// First error raised by any stage; later ones are dropped.
class ErrorSlot {
 public:
  void capture() {
    std::lock_guard lock(mu_);
    if (!error_) error_ = std::current_exception();
  }
  void rethrow() {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::mutex mu_;
  std::exception_ptr error_;
};

void set_flag(std::atomic<bool>& flag) {
  flag.store(true, std::memory_order_release);
  flag.notify_all();
}

void wait_flag(const std::atomic<bool>& flag) {
  flag.wait(false, std::memory_order_acquire);
}

struct BatchOutput {
  std::vector<std::vector<CoarseHit>> candidates;
  std::vector<SearchResult> results;
};

void validate(const IvfRabitqIndex& index, const FloatMatrix& queries,
              const SearchParams& params) {
  if (queries.rows() > 0 && queries.cols() != index.dim) {
    throw InvalidArgument("search: query dim " + std::to_string(queries.cols()) +
                          " != index dim " + std::to_string(index.dim));
  }
  if (params.k == 0) throw InvalidArgument("search: k must be >= 1");
  if (params.rerank_factor == 0) {
    throw InvalidArgument("search: rerank_factor must be >= 1");
  }
  if (params.workers == 0) throw InvalidArgument("search: workers must be >= 1");
  if (params.batch_size == 0) {
    throw InvalidArgument("search: batch size must be >= 1");
  }
}

// One batch through the staged pipeline. `source` == nullptr stops after
// Top-M and leaves the candidates in `out`.
void run_batch(const IvfRabitqIndex& index, const FloatMatrix& queries,
               std::size_t first_query, std::size_t n_probe,
               const SearchParams& params, const VectorSource* source,
               BatchOutput& out, SearchStats& stats) {
  const std::size_t b = queries.rows();
  const std::size_t dim = index.dim;
  const auto batch_start = Clock::now();

  // Probe and per-cluster query quantization.
  const FloatMatrix rotated = rotate(index.rotation, queries);
  const auto probes = probe_clusters(rotated, index, n_probe);
  std::vector<QueryContext> contexts(b);
  std::vector<std::vector<NibbleLut>> luts(b);
  for (std::size_t q = 0; q < b; ++q) {
    contexts[q] = quantize_query(rotated.row(q), probes[q], index.centroids, q);
    if (params.kernel == Kernel::kGather) {
      for (const auto& probe : contexts[q].probes) {
        luts[q].push_back(build_lut(probe.query_code, dim));
      }
    }
  }
  stats.probe_seconds += seconds_between(batch_start, Clock::now());

  std::vector<BlockTask> tasks = flatten_tasks(contexts, index);
  std::vector<std::size_t> task_begin(b + 1, tasks.size());
  for (std::size_t t = tasks.size(); t-- > 0;) task_begin[tasks[t].query_id] = t;
  for (std::size_t q = b; q-- > 0;) {
    task_begin[q] = std::min(task_begin[q], task_begin[q + 1]);
  }
  const Schedule schedule =
      make_schedule(std::move(tasks), params.scheduling, params.workers);
  stats.rounds += schedule.rounds.size();
  stats.tasks += schedule.total_tasks;
  stats.idle_slots += schedule.idle_slots;

  std::vector<std::vector<CoarseHit>> task_hits(schedule.total_tasks);
  auto remaining = std::make_unique<std::atomic<std::size_t>[]>(b);
  auto coarse_done = std::make_unique<std::atomic<bool>[]>(b);
  auto topk_done = std::make_unique<std::atomic<bool>[]>(b);
  for (std::size_t q = 0; q < b; ++q) {
    remaining[q].store(task_begin[q + 1] - task_begin[q]);
    coarse_done[q].store(task_begin[q + 1] == task_begin[q]);
    topk_done[q].store(false);
  }
  out.candidates.assign(b, {});
  if (source != nullptr) out.results.assign(b, {});
  ErrorSlot errors;

  auto score = [&](const BlockTask& task) {
    try {
      const auto& block = index.lists[task.cluster_id][task.block_index];
      const auto& probe = contexts[task.query_id].probes[task.probe_rank];
      auto& hits = task_hits[task.sequence];
      hits.reserve(block.size());
      if (params.kernel == Kernel::kSelect) {
        coarse_select(probe.query_code, probe.l1_scale, block, dim, hits);
      } else {
        coarse_gather(luts[task.query_id][task.probe_rank], block,
                      probe.l1_scale, hits);
      }
    } catch (...) {
      errors.capture();
    }
    if (remaining[task.query_id].fetch_sub(1, std::memory_order_acq_rel) == 1) {
      set_flag(coarse_done[task.query_id]);
    }
  };

  // Distance workers: one slot per worker per round, rounds separated by a
  // barrier.
  const std::size_t workers = params.workers;
  std::vector<Clock::time_point> worker_end(workers);
  std::barrier round_barrier(static_cast<std::ptrdiff_t>(workers));
  const auto coarse_start = Clock::now();
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (const auto& round : schedule.rounds) {
        if (w < round.size()) score(round[w]);
        round_barrier.arrive_and_wait();
      }
      worker_end[w] = Clock::now();
    });
  }
  auto join_workers = [&] {
    for (auto& t : pool) t.join();
    const auto last = *std::max_element(worker_end.begin(), worker_end.end());
    stats.coarse_seconds += seconds_between(coarse_start, last);
  };

  std::atomic<std::uint64_t> hit_count{0};
  std::atomic<std::uint64_t> insertions{0};
  std::atomic<std::uint64_t> skipped{0};
  const std::size_t m = params.candidates();
  auto topk_stage = [&] {
    const auto start = Clock::now();
    for (std::size_t q = 0; q < b; ++q) {
      wait_flag(coarse_done[q]);
      try {
        // Tasks of a query are stored in probe order, nearest cluster first.
        TopkCollector collector(m, params.pruning);
        std::uint64_t n = 0;
        for (std::size_t t = task_begin[q]; t < task_begin[q + 1]; ++t) {
          collector.push(task_hits[t]);
          n += task_hits[t].size();
          task_hits[t] = {};
        }
        out.candidates[q] = collector.take_sorted();
        hit_count += n;
        insertions += collector.insertions();
        skipped += collector.skipped();
      } catch (...) {
        errors.capture();
      }
      set_flag(topk_done[q]);
    }
    stats.topk_seconds += seconds_between(start, Clock::now());
  };

  auto rerank_stage = [&] {
    if (source == nullptr) return;
    const auto start = Clock::now();
    for (std::size_t q = 0; q < b; ++q) {
      wait_flag(topk_done[q]);
      try {
        auto& result = out.results[q];
        if (params.exact_rerank) {
          result = rerank(queries.row(q), out.candidates[q], *source, params.k,
                          first_query + q);
        } else {
          result.query_id = first_query + q;
          const std::size_t n = std::min(params.k, out.candidates[q].size());
          for (std::size_t i = 0; i < n; ++i) {
            result.neighbors.push_back({out.candidates[q][i].vector_id,
                                        out.candidates[q][i].approx_distance});
          }
        }
      } catch (...) {
        errors.capture();
      }
    }
    stats.rerank_seconds += seconds_between(start, Clock::now());
  };

  switch (params.pipeline) {
    case Pipeline::kNone:
      join_workers();
      topk_stage();
      rerank_stage();
      break;
    case Pipeline::kStage2:
      topk_stage();
      join_workers();
      rerank_stage();
      break;
    case Pipeline::kStage3: {
      std::jthread topk_thread(topk_stage);
      rerank_stage();
      topk_thread.join();
      join_workers();
      break;
    }
  }
  errors.rethrow();

  stats.hits += hit_count.load();
  stats.heap_insertions += insertions.load();
  stats.prune_skips += skipped.load();
  stats.queries += b;
  stats.batches += 1;
  stats.total_seconds += seconds_between(batch_start, Clock::now());
}

template <typename Consume>
void for_each_batch(const IvfRabitqIndex& index, const FloatMatrix& queries,
                    const SearchParams& params, const VectorSource* source,
                    SearchStats* stats, Consume&& consume) {
  validate(index, queries, params);
  if (queries.rows() == 0) return;
  const std::size_t n_probe = resolve_n_probe(params, index.n_list);
  SearchStats local;
  for (std::size_t begin = 0; begin < queries.rows(); begin += params.batch_size) {
    const std::size_t count = std::min(params.batch_size, queries.rows() - begin);
    BatchOutput out;
    run_batch(index, queries.slice_rows(begin, count), begin, n_probe, params,
              source, out, local);
    consume(out);
  }
  if (stats != nullptr) *stats += local;
}

}  // namespace

std::string_view to_string(Kernel k) {
  return k == Kernel::kSelect ? "select" : "gather";
}

std::string_view to_string(Scheduling s) {
  return s == Scheduling::kQueryLevel ? "query" : "block";
}

std::string_view to_string(Pipeline p) {
  switch (p) {
    case Pipeline::kNone: return "none";
    case Pipeline::kStage2: return "stage2";
    case Pipeline::kStage3: return "stage3";
  }
  return "?";
}

std::size_t auto_n_probe(std::size_t n_list) {
  return std::max<std::size_t>(1, (n_list * 5 + 99) / 100);
}

std::size_t resolve_n_probe(const SearchParams& params, std::size_t n_list) {
  const std::size_t n = params.n_probe == 0 ? auto_n_probe(n_list) : params.n_probe;
  if (n > n_list) {
    throw InvalidArgument("nProbe " + std::to_string(n) + " > nList " +
                          std::to_string(n_list));
  }
  return n;
}

SearchStats& SearchStats::operator+=(const SearchStats& o) {
  queries += o.queries;
  batches += o.batches;
  rounds += o.rounds;
  tasks += o.tasks;
  idle_slots += o.idle_slots;
  hits += o.hits;
  heap_insertions += o.heap_insertions;
  prune_skips += o.prune_skips;
  probe_seconds += o.probe_seconds;
  coarse_seconds += o.coarse_seconds;
  topk_seconds += o.topk_seconds;
  rerank_seconds += o.rerank_seconds;
  total_seconds += o.total_seconds;
  return *this;
}

std::vector<ProbeList> probe_clusters(const FloatMatrix& queries_rotated,
                                      const IvfRabitqIndex& index,
                                      std::size_t n_probe) {
  if (n_probe == 0 || n_probe > index.n_list) {
    throw InvalidArgument("probe_clusters: nProbe " + std::to_string(n_probe) +
                          " outside [1, nList=" + std::to_string(index.n_list) +
                          "]");
  }
  const FloatMatrix dist = pairwise_l2(queries_rotated, index.centroids.matrix);
  std::vector<ProbeList> out(queries_rotated.rows());
  std::vector<ClusterId> order(index.n_list);
  for (std::size_t q = 0; q < out.size(); ++q) {
    const auto row = dist.row(q);
    std::iota(order.begin(), order.end(), ClusterId{0});
    std::partial_sort(order.begin(),
                      order.begin() + static_cast<std::ptrdiff_t>(n_probe),
                      order.end(), [&](ClusterId a, ClusterId b) {
                        return row[a] != row[b] ? row[a] < row[b] : a < b;
                      });
    out[q].reserve(n_probe);
    for (std::size_t i = 0; i < n_probe; ++i) {
      out[q].emplace_back(order[i], row[order[i]]);
    }
  }
  return out;
}

std::vector<BlockTask> flatten_tasks(std::span<const QueryContext> contexts,
                                     const IvfRabitqIndex& index) {
  std::vector<BlockTask> tasks;
  for (std::size_t q = 0; q < contexts.size(); ++q) {
    const auto& probes = contexts[q].probes;
    for (std::size_t rank = 0; rank < probes.size(); ++rank) {
      const ClusterId c = probes[rank].cluster_id;
      for (std::size_t blk = 0; blk < index.lists.at(c).size(); ++blk) {
        tasks.push_back(BlockTask{q, rank, c, blk, tasks.size()});
      }
    }
  }
  return tasks;
}

Schedule schedule_blocks(std::span<const QueryContext> contexts,
                         const IvfRabitqIndex& index, Scheduling mode,
                         std::size_t workers) {
  return make_schedule(flatten_tasks(contexts, index), mode, workers);
}

Schedule schedule_counts(std::span<const std::size_t> tasks_per_query,
                         Scheduling mode, std::size_t workers) {
  std::vector<BlockTask> tasks;
  for (std::size_t q = 0; q < tasks_per_query.size(); ++q) {
    for (std::size_t i = 0; i < tasks_per_query[q]; ++i) {
      BlockTask t;
      t.query_id = q;
      t.sequence = tasks.size();
      tasks.push_back(t);
    }
  }
  return make_schedule(std::move(tasks), mode, workers);
}

float approx_distance(float scale, int inner_product, std::size_t dim,
                      float cx) noexcept {
  const int hamming = (static_cast<int>(dim) - inner_product) / 2;
  return scale * static_cast<float>(hamming) + cx;
}

int code_inner_product(std::span<const std::uint8_t> a,
                       std::span<const std::uint8_t> b,
                       std::size_t dim) noexcept {
  const std::size_t n = std::min(a.size(), b.size());
  int mismatches = 0;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t x, y;
    std::memcpy(&x, a.data() + i, 8);
    std::memcpy(&y, b.data() + i, 8);
    mismatches += std::popcount(x ^ y);
  }
  for (; i < n; ++i) {
    mismatches += std::popcount(static_cast<unsigned>(a[i] ^ b[i]));
  }
  return static_cast<int>(dim) - 2 * mismatches;
}

void coarse_select(std::span<const std::uint8_t> query_code, float l1_scale,
                   const IndexBlock& block, std::size_t dim,
                   std::vector<CoarseHit>& out) {
  const std::size_t stride = code_bytes(dim);
  const float scale = l1_scale / static_cast<float>(dim);
  for (std::size_t i = 0; i < block.size(); ++i) {
    const int ip = code_inner_product(query_code, block.code(i, stride), dim);
    out.push_back({block.vector_ids[i], approx_distance(scale, ip, dim, block.cx[i])});
  }
}

std::vector<CoarseHit> coarse_select(std::span<const std::uint8_t> query_code,
                                     float l1_scale, const IndexBlock& block,
                                     std::size_t dim) {
  std::vector<CoarseHit> out;
  out.reserve(block.size());
  coarse_select(query_code, l1_scale, block, dim, out);
  return out;
}

NibbleLut build_lut(std::span<const std::uint8_t> query_code, std::size_t dim) {
  NibbleLut lut;
  lut.dim = dim;
  lut.groups = (dim + 3) / 4;
  lut.pad = static_cast<int>(lut.groups * 4 - dim);
  lut.table.resize(lut.groups * 16);
  for (std::size_t g = 0; g < lut.groups; ++g) {
    const unsigned qn = (query_code[g >> 1] >> ((g & 1) * 4)) & 0xFu;
    for (unsigned p = 0; p < 16; ++p) {
      lut.table[g * 16 + p] =
          static_cast<std::int8_t>(4 - 2 * std::popcount(qn ^ p));
    }
  }
  return lut;
}

int NibbleLut::inner_product(std::span<const std::uint8_t> code) const noexcept {
  int ip = 0;
  const std::int8_t* t = table.data();
  const std::size_t full = groups / 2;
  for (std::size_t b = 0; b < full; ++b, t += 32) {
    ip += t[code[b] & 0xF] + t[16 + (code[b] >> 4)];
  }
  if (groups & 1) ip += t[code[full] & 0xF];
  return ip - pad;
}

void coarse_gather(const NibbleLut& lut, const IndexBlock& block,
                   float l1_scale, std::vector<CoarseHit>& out) {
  const std::size_t stride = code_bytes(lut.dim);
  const float scale = l1_scale / static_cast<float>(lut.dim);
  for (std::size_t i = 0; i < block.size(); ++i) {
    const int ip = lut.inner_product(block.code(i, stride));
    out.push_back(
        {block.vector_ids[i], approx_distance(scale, ip, lut.dim, block.cx[i])});
  }
}

std::vector<CoarseHit> coarse_gather(const NibbleLut& lut,
                                     const IndexBlock& block, float l1_scale) {
  std::vector<CoarseHit> out;
  out.reserve(block.size());
  coarse_gather(lut, block, l1_scale, out);
  return out;
}

TopkCollector::TopkCollector(std::size_t capacity, bool pruning)
    : capacity_(capacity), pruning_(pruning) {
  heap_.reserve(capacity + 1);
}

void TopkCollector::push(const CoarseHit& hit) {
  if (capacity_ == 0) return;
  if (pruning_ && heap_.size() == capacity_ && !hit_before(hit, heap_.front())) {
    ++skipped_;
    return;
  }
  heap_.push_back(hit);
  std::push_heap(heap_.begin(), heap_.end(), hit_before);
  ++insertions_;
  if (heap_.size() > capacity_) {
    std::pop_heap(heap_.begin(), heap_.end(), hit_before);
    heap_.pop_back();
  }
}

std::vector<CoarseHit> TopkCollector::take_sorted() {
  std::sort_heap(heap_.begin(), heap_.end(), hit_before);
  return std::exchange(heap_, {});
}

std::vector<CoarseHit> topk_select(std::span<const CoarseHit> hits,
                                   std::size_t m, bool pruning,
                                   TopkCounters* counters) {
  TopkCollector collector(m, pruning);
  collector.push(hits);
  if (counters != nullptr) {
    counters->insertions = collector.insertions();
    counters->skipped = collector.skipped();
  }
  return collector.take_sorted();
}

float exact_distance(std::span<const float> a, std::span<const float> b) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return static_cast<float>(acc);
}

SearchResult rerank(std::span<const float> query_raw,
                    std::span<const CoarseHit> candidates,
                    const VectorSource& source, std::size_t k,
                    std::size_t query_id) {
  SearchResult result;
  result.query_id = query_id;
  result.neighbors.reserve(candidates.size());
  for (const auto& c : candidates) {
    result.neighbors.push_back(
        {c.vector_id, exact_distance(query_raw, source.fetch(c.vector_id))});
  }
  const auto before = [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  };
  const std::size_t n = std::min(k, result.neighbors.size());
  std::partial_sort(result.neighbors.begin(),
                    result.neighbors.begin() + static_cast<std::ptrdiff_t>(n),
                    result.neighbors.end(), before);
  result.neighbors.resize(n);
  return result;
}

std::vector<SearchResult> search_batch(const IvfRabitqIndex& index,
                                       const VectorSource& source,
                                       const FloatMatrix& queries,
                                       const SearchParams& params,
                                       SearchStats* stats) {
  std::vector<SearchResult> results;
  results.reserve(queries.rows());
  for_each_batch(index, queries, params, &source, stats, [&](BatchOutput& out) {
    std::move(out.results.begin(), out.results.end(), std::back_inserter(results));
  });
  return results;
}

std::vector<std::vector<CoarseHit>> coarse_candidates(
    const IvfRabitqIndex& index, const FloatMatrix& queries,
    const SearchParams& params, SearchStats* stats) {
  std::vector<std::vector<CoarseHit>> candidates;
  candidates.reserve(queries.rows());
  for_each_batch(index, queries, params, nullptr, stats, [&](BatchOutput& out) {
    std::move(out.candidates.begin(), out.candidates.end(),
              std::back_inserter(candidates));
  });
  return candidates;
}

}  // namespace bitivf
