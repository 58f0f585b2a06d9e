#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "bitivf/error.hpp"
#include "bitivf/index.hpp"
#include "test_util.hpp"

using namespace bitivf;
using bitivf::testing::random_matrix;
using bitivf::testing::TempDir;

namespace {

IvfRabitqIndex small_index(std::uint64_t seed, std::size_t n = 600,
                           std::size_t dim = 20, std::size_t n_list = 7,
                           std::size_t block = 32) {
  BuildConfig cfg;
  cfg.n_list = n_list;
  cfg.block_size = block;
  cfg.seed = seed;
  cfg.kmeans_max_iter = 8;
  return build(random_matrix(n, dim, seed, -2.0f, 2.0f), cfg);
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST_CASE("auto nList is ceil(sqrt(N))") {
  CHECK(auto_n_list(1'000'000) == 1000);
  CHECK(auto_n_list(20'000) == 142);
  CHECK(auto_n_list(1) == 1);
  CHECK(auto_n_list(17) == 5);
  CHECK(auto_n_list(16) == 4);
}

TEST_CASE("build: each point its own centroid") {
  const std::size_t n = 9;
  const auto raw = random_matrix(n, 6, 2, -10.0f, 10.0f);
  BuildConfig cfg;
  cfg.n_list = n;
  cfg.block_size = 1;
  const auto index = build(raw, cfg);
  REQUIRE(index.lists.size() == n);
  for (const auto& list : index.lists) {
    REQUIRE(list.size() == 1);
    CHECK(list[0].size() == 1);
    CHECK(list[0].residual_l1[0] == 0.0f);
  }
}

TEST_CASE("build: one tight cluster splits into 1024 + 976") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g(0.0f, 1e-3f);
  FloatMatrix raw(2000, 8);
  for (std::size_t i = 0; i < 2000; ++i) {
    for (auto& v : raw.row(i)) v = 3.0f + g(rng);
  }
  BuildConfig cfg;
  cfg.n_list = 1;
  const auto index = build(raw, cfg);
  REQUIRE(index.lists[0].size() == 2);
  CHECK(index.lists[0][0].size() == 1024);
  CHECK(index.lists[0][1].size() == 976);

  const auto s = stats(index);
  CHECK(s.list_sizes == std::vector<std::uint64_t>{2000});
  CHECK(s.total_blocks == 2);
}

TEST_CASE("build invariants: partition, assignment, block accounting") {
  const std::size_t n = 1500;
  const auto raw = random_matrix(n, 12, 8, -1.0f, 1.0f);
  BuildConfig cfg;
  cfg.n_list = 10;
  cfg.block_size = 64;
  cfg.assign_batch = 200;  // several assignment batches
  const auto index = build(raw, cfg);

  CHECK(index.total_vectors == n);
  std::vector<int> seen(n, 0);
  std::vector<ClusterId> owner(n);
  for (ClusterId c = 0; c < index.n_list; ++c) {
    const auto& list = index.lists[c];
    const std::size_t len = index.list_size(c);
    CHECK(list.size() == (len + cfg.block_size - 1) / cfg.block_size);
    for (const auto& block : list) {
      CHECK(block.cluster_id == c);
      CHECK(block.size() <= cfg.block_size);
      CHECK(block.codes.size() == block.size() * index.code_stride());
      CHECK(block.cx.size() == block.size());
      CHECK(block.residual_l1.size() == block.size());
      for (VectorId id : block.vector_ids) {
        ++seen[id];
        owner[id] = c;
      }
    }
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int k) { return k == 1; }));

  const auto rotated = rotate(index.rotation, raw);
  const auto dist = pairwise_l2(rotated, index.centroids.matrix);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = dist.row(i);
    const auto best = static_cast<ClusterId>(
        std::min_element(row.begin(), row.end()) - row.begin());
    CHECK(owner[i] == best);
  }
}

TEST_CASE("build is deterministic") {
  CHECK(identical(small_index(4), small_index(4)));
  CHECK_FALSE(identical(small_index(4), small_index(5)));
}

TEST_CASE("build errors") {
  BuildConfig cfg;
  cfg.n_list = 10;
  CHECK_THROWS_AS(build(random_matrix(5, 4, 1), cfg), InvalidArgument);

  auto bad = random_matrix(50, 4, 1);
  bad(3, 2) = std::numeric_limits<float>::quiet_NaN();
  cfg.n_list = 2;
  CHECK_THROWS_AS(build(bad, cfg), InvalidData);

  cfg.block_size = 0;
  CHECK_THROWS_AS(build(random_matrix(50, 4, 1), cfg), InvalidArgument);
}

TEST_CASE("save/load round-trips bit-exactly") {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto index = small_index(seed, 200 + seed * 37, 5 + seed * 9, 3 + seed, 16);
    const auto path = dir / ("idx" + std::to_string(seed));
    save(index, path);
    CHECK(identical(load(path), index));
    CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  }
}

TEST_CASE("load rejects corrupted files") {
  TempDir dir;
  const auto index = small_index(3);
  const auto path = dir / "idx";
  save(index, path);
  const std::string good = read_all(path);

  SUBCASE("truncated") {
    for (std::size_t cut : {good.size() - 1, good.size() / 2, std::size_t{10}, std::size_t{3}}) {
      write_all(path, good.substr(0, cut));
      CHECK_THROWS_AS(load(path), CorruptIndex);
    }
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    write_all(path, bad);
    try {
      load(path);
      FAIL("expected CorruptIndex");
    } catch (const CorruptIndex& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
  SUBCASE("bad version") {
    std::string bad = good;
    bad[4] = 2;
    write_all(path, bad);
    CHECK_THROWS_AS(load(path), CorruptIndex);
  }
  SUBCASE("flipped payload byte fails the checksum") {
    std::string bad = good;
    bad[good.size() / 2] = static_cast<char>(bad[good.size() / 2] ^ 0x40);
    write_all(path, bad);
    try {
      load(path);
      FAIL("expected CorruptIndex");
    } catch (const CorruptIndex& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS(load(dir / "nope"));
  }
}

TEST_CASE("serialized header layout") {
  const auto index = small_index(1, 100, 16, 2, 8);
  const std::string bytes = serialize(index);
  CHECK(bytes.substr(0, 4) == "BIVF");
  std::uint32_t u32;
  std::uint64_t u64;
  std::memcpy(&u32, bytes.data() + 4, 4);
  CHECK(u32 == 1);
  std::memcpy(&u32, bytes.data() + 8, 4);
  CHECK(u32 == 16);
  std::memcpy(&u32, bytes.data() + 12, 4);
  CHECK(u32 == 2);
  std::memcpy(&u32, bytes.data() + 16, 4);
  CHECK(u32 == 8);
  std::memcpy(&u64, bytes.data() + 20, 8);
  CHECK(u64 == 100);
  std::memcpy(&u64, bytes.data() + 28, 8);
  CHECK(u64 == 1);
  // header + rotation + centroids + per-list/per-block records + CRC
  const auto s = stats(index);
  const std::size_t expect = 36 + 16 * 16 * 4 + 2 * 16 * 4 + 2 * 4 +
                             s.total_blocks * 4 + 100 * (8 + 2 + 4 + 4) + 4;
  CHECK(bytes.size() == expect);
}

TEST_CASE("stats") {
  const auto empty = stats(IvfRabitqIndex{});
  CHECK(empty.total_vectors == 0);
  CHECK(empty.total_blocks == 0);
  CHECK(empty.memory_bytes == 0);

  const auto index = small_index(2, 300, 128, 4, 50);
  const auto s = stats(index);
  CHECK(s.code_bytes == 300 * 16);
  CHECK(s.constant_bytes == 300 * 8);
  CHECK(s.id_bytes == 300 * 8);
  CHECK(s.metadata_bytes == (128 * 128 + 4 * 128) * 4 + s.total_blocks * 8);
  CHECK(s.memory_bytes ==
        s.code_bytes + s.constant_bytes + s.id_bytes + s.metadata_bytes);
  std::uint64_t total = 0;
  for (auto v : s.list_sizes) total += v;
  CHECK(total == 300);
}
