#include "doctest.h"

#include <algorithm>
#include <bit>
#include <numeric>
#include <random>

#include "bitivf/dataset.hpp"
#include "bitivf/error.hpp"
#include "bitivf/search.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace bitivf;
using bitivf::testing::random_matrix;

namespace {

BitCode random_code(std::mt19937_64& rng, std::size_t dim) {
  BitCode code(code_bytes(dim));
  for (auto& b : code) b = static_cast<std::uint8_t>(rng());
  if (dim % 8 != 0) code.back() &= static_cast<std::uint8_t>((1u << (dim % 8)) - 1);
  return code;
}

IndexBlock block_of(std::span<const BitCode> codes, std::span<const float> cx) {
  IndexBlock block;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    block.append(QuantizedEntry{codes[i], cx[i], 0.0f, i});
  }
  return block;
}

struct Corpus {
  FloatMatrix base;
  FloatMatrix queries;
  IvfRabitqIndex index;
  RawStore store;
};

Corpus make_corpus(std::size_t n, std::size_t dim, std::size_t clusters,
                   std::size_t n_queries, std::size_t n_list,
                   std::size_t block_size, std::uint64_t seed) {
  GaussianMixture mix(dim, clusters, seed);
  Corpus c;
  c.base = mix.sample(n, seed + 1);
  c.queries = mix.sample(n_queries, seed + 2);
  BuildConfig cfg;
  cfg.n_list = n_list;
  cfg.block_size = block_size;
  cfg.seed = seed;
  cfg.kmeans_max_iter = 10;
  c.index = build(c.base, cfg);
  c.store = RawStore(c.base);
  return c;
}

}  // namespace

TEST_CASE("auto nProbe is ceil(5% of nList)") {
  CHECK(auto_n_probe(1000) == 50);
  CHECK(auto_n_probe(142) == 8);
  CHECK(auto_n_probe(10) == 1);
  SearchParams p;
  p.n_probe = 11;
  CHECK_THROWS_AS(resolve_n_probe(p, 10), InvalidArgument);
}

TEST_CASE("probe_clusters") {
  const auto c = make_corpus(800, 8, 5, 20, 12, 64, 3);
  SUBCASE("a centroid probes itself first") {
    const auto q = c.index.centroids.matrix.slice_rows(4, 1);
    CHECK(probe_clusters(q, c.index, 3)[0][0].first == 4);
  }
  SUBCASE("nProbe = nList returns every cluster, sorted; matches a full sort") {
    const auto rotated = rotate(c.index.rotation, c.queries);
    const auto all = probe_clusters(rotated, c.index, 12);
    const auto some = probe_clusters(rotated, c.index, 5);
    for (std::size_t q = 0; q < c.queries.rows(); ++q) {
      std::vector<std::pair<float, ClusterId>> oracle;
      for (ClusterId j = 0; j < 12; ++j) {
        oracle.emplace_back(
            testing::direct_distance(rotated.row(q), c.index.centroids.centroid(j)), j);
      }
      std::sort(oracle.begin(), oracle.end());
      REQUIRE(all[q].size() == 12);
      for (std::size_t r = 0; r + 1 < 12; ++r) {
        const auto& a = all[q][r];
        const auto& b = all[q][r + 1];
        CHECK((a.second < b.second || (a.second == b.second && a.first < b.first)));
      }
      // Same cluster sets at depth 5 (distances are well separated here).
      std::vector<ClusterId> got, want;
      for (std::size_t r = 0; r < 5; ++r) {
        got.push_back(some[q][r].first);
        want.push_back(oracle[r].second);
      }
      CHECK(got == want);
    }
  }
  SUBCASE("nProbe out of range") {
    CHECK_THROWS_AS(probe_clusters(c.queries, c.index, 13), InvalidArgument);
    CHECK_THROWS_AS(probe_clusters(c.queries, c.index, 0), InvalidArgument);
  }
}

TEST_CASE("schedule accounting for 2 queries x 5 blocks on 4 workers") {
  const std::size_t tasks[] = {5, 5};
  const auto ql = schedule_counts(tasks, Scheduling::kQueryLevel, 4);
  CHECK(ql.rounds.size() == 4);
  CHECK(ql.idle_slots == 6);
  const auto bl = schedule_counts(tasks, Scheduling::kBlockLevel, 4);
  CHECK(bl.rounds.size() == 3);
  CHECK(bl.idle_slots == 2);
  // Query order is preserved in block-level dispatch.
  std::vector<std::size_t> order;
  for (const auto& r : bl.rounds) {
    for (const auto& t : r) order.push_back(t.query_id);
  }
  CHECK(std::is_sorted(order.begin(), order.end()));
}

TEST_CASE("schedule: divisible totals leave no idle slots; one query is the same either way") {
  const std::size_t tasks[] = {3, 7, 2};
  CHECK(schedule_counts(tasks, Scheduling::kBlockLevel, 4).idle_slots == 0);
  const std::size_t one[] = {9};
  const auto a = schedule_counts(one, Scheduling::kQueryLevel, 4);
  const auto b = schedule_counts(one, Scheduling::kBlockLevel, 4);
  CHECK(a.rounds == b.rounds);
  CHECK(a.idle_slots == b.idle_slots);
  CHECK_THROWS_AS(schedule_counts(one, Scheduling::kBlockLevel, 0), InvalidArgument);
}

TEST_CASE("schedule: idle-slot bounds on random batch shapes") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t workers = 1 + rng() % 48;
    std::vector<std::size_t> tasks(1 + rng() % 64);
    for (auto& t : tasks) t = rng() % 40;
    const auto bl = schedule_counts(tasks, Scheduling::kBlockLevel, workers);
    const auto ql = schedule_counts(tasks, Scheduling::kQueryLevel, workers);
    CHECK(bl.idle_slots <= workers - 1);
    CHECK(ql.idle_slots <= tasks.size() * (workers - 1));
    CHECK(bl.idle_slots <= ql.idle_slots);
  }
}

TEST_CASE("schedule_blocks walks probes in order") {
  const auto c = make_corpus(500, 8, 3, 4, 6, 16, 9);
  const auto rotated = rotate(c.index.rotation, c.queries);
  const auto probes = probe_clusters(rotated, c.index, 3);
  std::vector<QueryContext> ctx;
  for (std::size_t q = 0; q < 4; ++q) {
    ctx.push_back(quantize_query(rotated.row(q), probes[q], c.index.centroids, q));
  }
  const auto s = schedule_blocks(ctx, c.index, Scheduling::kBlockLevel, 5);
  std::size_t expect_total = 0;
  for (const auto& p : probes) {
    for (const auto& [cluster, d] : p) expect_total += c.index.lists[cluster].size();
  }
  CHECK(s.total_tasks == expect_total);
  std::size_t seq = 0;
  for (const auto& round : s.rounds) {
    for (const auto& t : round) {
      CHECK(t.sequence == seq++);
      CHECK(t.cluster_id == ctx[t.query_id].probes[t.probe_rank].cluster_id);
    }
  }
}

TEST_CASE("coarse_select arithmetic") {
  const std::size_t dim = 8;
  const BitCode q = {0b10110010};
  SUBCASE("identical codes") {
    const BitCode codes[] = {q};
    const float cx[] = {2.5f};
    const auto hits = coarse_select(q, 3.0f, block_of(codes, cx), dim);
    CHECK(code_inner_product(q, q, dim) == 8);
    CHECK(hits[0].approx_distance == 2.5f);
  }
  SUBCASE("complementary codes") {
    const BitCode comp = {static_cast<std::uint8_t>(~q[0])};
    CHECK(code_inner_product(q, comp, dim) == -8);
    const BitCode codes[] = {comp};
    const float cx[] = {0.0f};
    CHECK(coarse_select(q, 8.0f, block_of(codes, cx), dim)[0].approx_distance == 8.0f);
  }
  SUBCASE("scaled hamming plus constant") {
    const BitCode other = {static_cast<std::uint8_t>(q[0] ^ 0b00001111)};  // hamming 4
    const BitCode codes[] = {other};
    const float cx[] = {1.5f};
    CHECK(coarse_select(q, 8.0f, block_of(codes, cx), dim)[0].approx_distance == 5.5f);
  }
}

TEST_CASE("hamming/inner-product identity holds for every 8-bit pair") {
  for (unsigned a = 0; a < 256; ++a) {
    for (unsigned b = 0; b < 256; ++b) {
      const BitCode x = {static_cast<std::uint8_t>(a)};
      const BitCode y = {static_cast<std::uint8_t>(b)};
      const int ip = testing::sign_inner_product(x, y, 8);
      CHECK(std::popcount(a ^ b) == (8 - ip) / 2);
      CHECK(code_inner_product(x, y, 8) == ip);
    }
  }
}

TEST_CASE("build_lut entries") {
  const BitCode ones = {0x0F};
  const auto lut = build_lut(ones, 4);
  CHECK(lut.groups == 1);
  CHECK(lut.at(0, 0b1111) == 4);
  CHECK(lut.at(0, 0b0000) == -4);
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto q = random_code(rng, 32);
    const auto l = build_lut(q, 32);
    for (std::size_t g = 0; g < l.groups; ++g) {
      const unsigned nib = (q[g / 2] >> ((g % 2) * 4)) & 0xF;
      CHECK(l.at(g, nib) == 4);
      for (unsigned p = 0; p < 16; ++p) {
        const int v = l.at(g, p);
        CHECK((v == -4 || v == -2 || v == 0 || v == 2 || v == 4));
      }
    }
  }
}

TEST_CASE("gather equals select on random codes, including padded widths") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<float> u(-5.0f, 5.0f);
  for (std::size_t dim : {1u, 3u, 4u, 6u, 8u, 13u, 64u, 100u, 128u}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto q = random_code(rng, dim);
      std::vector<BitCode> codes;
      std::vector<float> cx;
      for (int i = 0; i < 50; ++i) {
        codes.push_back(random_code(rng, dim));
        cx.push_back(u(rng));
      }
      codes.push_back(q);
      cx.push_back(0.0f);
      const auto block = block_of(codes, cx);
      const float scale = std::abs(u(rng)) * 10.0f;
      const auto lut = build_lut(q, dim);
      const auto a = coarse_select(q, scale, block, dim);
      const auto b = coarse_gather(lut, block, scale);
      CHECK(a == b);
      for (std::size_t i = 0; i < codes.size(); ++i) {
        CHECK(lut.inner_product(codes[i]) == testing::sign_inner_product(q, codes[i], dim));
      }
      CHECK(lut.inner_product(q) == static_cast<int>(dim));
    }
  }
}

TEST_CASE("topk_select") {
  const CoarseHit hits[] = {{0, 5.0f}, {1, 3.0f}, {2, 7.0f}, {3, 1.0f}};
  const auto top = topk_select(hits, 2, true);
  REQUIRE(top.size() == 2);
  CHECK(top[0].vector_id == 3);
  CHECK(top[1].vector_id == 1);

  const auto all = topk_select(hits, 10, false);
  CHECK(all.size() == 4);
  CHECK(std::is_sorted(all.begin(), all.end(), hit_before));

  const CoarseHit ties[] = {{9, 1.0f}, {4, 1.0f}, {7, 1.0f}};
  const auto t = topk_select(ties, 2, true);
  CHECK(t[0].vector_id == 4);
  CHECK(t[1].vector_id == 7);
}

TEST_CASE("pruning never changes the Top-M and saves insertions") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  std::vector<CoarseHit> hits(100'000);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    hits[i] = {i, std::floor(u(rng) * 100.0f) / 100.0f};  // plenty of ties
  }
  std::shuffle(hits.begin(), hits.end(), rng);
  for (std::size_t m : {1u, 10u, 1000u}) {
    TopkCounters on, off;
    const auto a = topk_select(hits, m, true, &on);
    const auto b = topk_select(hits, m, false, &off);
    CHECK(a == b);
    CHECK(off.insertions == hits.size());
    CHECK(on.insertions < off.insertions);
    CHECK(on.insertions + on.skipped == hits.size());
  }
}

TEST_CASE("rerank") {
  const auto base = random_matrix(300, 10, 8);
  const RawStore store(base);
  const auto q = random_matrix(1, 10, 9);

  SUBCASE("candidates reordered by exact distance") {
    const auto truth = testing::exact_topk(q.row(0), base, 5);
    std::vector<CoarseHit> cands;
    for (auto it = truth.rbegin(); it != truth.rend(); ++it) cands.push_back({it->second, 0.0f});
    const auto r = rerank(q.row(0), cands, store, 5);
    REQUIRE(r.neighbors.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(r.neighbors[i].id == truth[i].second);
      CHECK(r.neighbors[i].distance == truth[i].first);
    }
  }
  SUBCASE("stored vector as the query") {
    const std::vector<CoarseHit> cands = {{3, 0.0f}, {17, 0.0f}, {250, 0.0f}};
    const auto r = rerank(base.row(17), cands, store, 2);
    CHECK(r.neighbors[0].id == 17);
    CHECK(r.neighbors[0].distance == 0.0f);
  }
  SUBCASE("random candidate sets match restricted brute force") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
      std::vector<std::uint64_t> ids(300);
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      ids.resize(40);
      std::vector<CoarseHit> cands;
      for (auto id : ids) cands.push_back({id, 0.0f});
      const auto r = rerank(q.row(0), cands, store, 10);
      const auto truth = testing::exact_topk(q.row(0), base, 10, ids);
      for (std::size_t i = 0; i < 10; ++i) CHECK(r.neighbors[i].id == truth[i].second);
    }
  }
  SUBCASE("unknown id is an internal error") {
    const std::vector<CoarseHit> cands = {{1000, 0.0f}};
    CHECK_THROWS_AS(rerank(q.row(0), cands, store, 1), InternalError);
  }
}

TEST_CASE("exhaustive search reduces to exact search") {
  const auto c = make_corpus(3000, 16, 3, 60, 9, 128, 21);
  SearchParams p;
  p.k = 10;
  p.n_probe = 9;
  p.rerank_factor = 300;  // M = 3000 >= N
  p.batch_size = 16;
  const auto results = search_batch(c.index, c.store, c.queries, p);
  REQUIRE(results.size() == 60);
  for (std::size_t q = 0; q < 60; ++q) {
    const auto truth = testing::exact_topk(c.queries.row(q), c.base, 10);
    CHECK(results[q].query_id == q);
    REQUIRE(results[q].neighbors.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(results[q].neighbors[i].id == truth[i].second);
      CHECK(results[q].neighbors[i].distance == truth[i].first);
    }
  }
}

TEST_CASE("all 24 configurations and any worker count give identical results") {
  const auto c = make_corpus(4000, 24, 6, 70, 16, 100, 33);
  SearchParams ref;
  ref.k = 10;
  ref.n_probe = 4;
  ref.batch_size = 32;
  ref.kernel = Kernel::kSelect;
  ref.scheduling = Scheduling::kQueryLevel;
  ref.pruning = false;
  ref.pipeline = Pipeline::kNone;
  const auto expected = search_batch(c.index, c.store, c.queries, ref);

  for (Kernel kernel : {Kernel::kSelect, Kernel::kGather}) {
    for (Scheduling sched : {Scheduling::kQueryLevel, Scheduling::kBlockLevel}) {
      for (Pipeline pipe : {Pipeline::kNone, Pipeline::kStage2, Pipeline::kStage3}) {
        for (bool pruning : {false, true}) {
          for (std::size_t workers : {1u, 3u}) {
            SearchParams p = ref;
            p.kernel = kernel;
            p.scheduling = sched;
            p.pipeline = pipe;
            p.pruning = pruning;
            p.workers = workers;
            SearchStats st;
            CHECK(search_batch(c.index, c.store, c.queries, p, &st) == expected);
            CHECK(st.queries == 70);
            CHECK(st.hits == (pruning ? st.heap_insertions + st.prune_skips
                                      : st.heap_insertions));
          }
        }
      }
    }
  }
}

TEST_CASE("search_batch edge cases") {
  const auto c = make_corpus(1000, 8, 4, 5, 10, 64, 4);
  SearchParams p;
  p.k = 1;
  p.n_probe = 3;
  SUBCASE("a stored vector finds itself") {
    p.n_probe = 10;
    p.rerank_factor = 1000;
    const auto q = c.base.slice_rows(123, 1);
    const auto r = search_batch(c.index, c.store, q, p);
    CHECK(r[0].neighbors[0].id == 123);
    CHECK(r[0].neighbors[0].distance == 0.0f);
  }
  SUBCASE("empty batch") {
    CHECK(search_batch(c.index, c.store, FloatMatrix(0, 8), p).empty());
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(search_batch(c.index, c.store, FloatMatrix(1, 7), p), InvalidArgument);
    p.k = 0;
    CHECK_THROWS_AS(search_batch(c.index, c.store, c.queries, p), InvalidArgument);
    p.k = 1;
    p.workers = 0;
    CHECK_THROWS_AS(search_batch(c.index, c.store, c.queries, p), InvalidArgument);
    p.workers = 1;
    p.n_probe = 11;
    CHECK_THROWS_AS(search_batch(c.index, c.store, c.queries, p), InvalidArgument);
  }
  SUBCASE("store missing vectors surfaces as an internal error") {
    const RawStore partial(c.base.slice_rows(0, 10));
    p.k = 5;
    CHECK_THROWS_AS(search_batch(c.index, partial, c.queries, p), InternalError);
  }
  SUBCASE("coarse-only mode returns approximate distances") {
    p.k = 5;
    p.exact_rerank = false;
    const auto r = search_batch(c.index, c.store, c.queries, p);
    const auto cand = coarse_candidates(c.index, c.queries, p);
    for (std::size_t q = 0; q < 5; ++q) {
      REQUIRE(r[q].neighbors.size() == 5);
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(r[q].neighbors[i].id == cand[q][i].vector_id);
        CHECK(r[q].neighbors[i].distance == cand[q][i].approx_distance);
      }
    }
  }
}
