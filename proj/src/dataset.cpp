#include "bitivf/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>
#include <unordered_set>

#include "bitivf/core_math.hpp"
#include "bitivf/error.hpp"

namespace bitivf {
namespace {

static_assert(std::endian::native == std::endian::little,
              "vecs parsing assumes a little-endian host");

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Walks the records, handing each payload to `emit`. Returns (rows, d).
template <typename Emit>
std::pair<std::size_t, std::size_t> walk_records(
    std::span<const std::uint8_t> bytes, std::size_t elem_size,
    std::size_t limit, Emit&& emit) {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::int32_t dim = 0;
  while (offset < bytes.size() && (limit == 0 || rows < limit)) {
    if (bytes.size() - offset < 4) {
      throw FormatError("truncated dimension header at byte " +
                        std::to_string(offset));
    }
    std::int32_t d;
    std::memcpy(&d, bytes.data() + offset, 4);
    if (d <= 0) {
      throw FormatError("non-positive dimension " + std::to_string(d) +
                        " at byte " + std::to_string(offset));
    }
    if (rows > 0 && d != dim) {
      throw FormatError("dimension " + std::to_string(d) + " at byte " +
                        std::to_string(offset) + " differs from " +
                        std::to_string(dim));
    }
    dim = d;
    const std::size_t payload = static_cast<std::size_t>(d) * elem_size;
    if (bytes.size() - offset - 4 < payload) {
      throw FormatError("truncated record at byte " + std::to_string(offset));
    }
    emit(bytes.data() + offset + 4, static_cast<std::size_t>(d));
    offset += 4 + payload;
    ++rows;
  }
  return {rows, static_cast<std::size_t>(dim)};
}

template <typename Elem>
FloatMatrix parse_float_records(std::span<const std::uint8_t> bytes,
                                std::size_t limit) {
  std::vector<float> data;
  const auto [rows, dim] =
      walk_records(bytes, sizeof(Elem), limit,
                   [&](const std::uint8_t* p, std::size_t d) {
                     for (std::size_t i = 0; i < d; ++i) {
                       Elem v;
                       std::memcpy(&v, p + i * sizeof(Elem), sizeof(Elem));
                       data.push_back(static_cast<float>(v));
                     }
                   });
  return FloatMatrix(rows, dim, std::move(data));
}

template <typename T>
void append_raw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

FloatMatrix parse_fvecs(std::span<const std::uint8_t> bytes, std::size_t limit) {
  return parse_float_records<float>(bytes, limit);
}

FloatMatrix parse_bvecs(std::span<const std::uint8_t> bytes, std::size_t limit) {
  return parse_float_records<std::uint8_t>(bytes, limit);
}

IdLists parse_ivecs(std::span<const std::uint8_t> bytes, std::size_t limit) {
  IdLists out;
  walk_records(bytes, 4, limit, [&](const std::uint8_t* p, std::size_t d) {
    auto& row = out.emplace_back(d);
    std::memcpy(row.data(), p, d * 4);
  });
  return out;
}

FloatMatrix read_fvecs(const std::filesystem::path& path, std::size_t limit) {
  return parse_fvecs(read_file(path), limit);
}

FloatMatrix read_bvecs(const std::filesystem::path& path, std::size_t limit) {
  return parse_bvecs(read_file(path), limit);
}

IdLists read_ivecs(const std::filesystem::path& path, std::size_t limit) {
  return parse_ivecs(read_file(path), limit);
}

void write_fvecs(const std::filesystem::path& path, const FloatMatrix& vectors) {
  std::string bytes;
  bytes.reserve(vectors.rows() * (4 + vectors.cols() * 4));
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    append_raw(bytes, static_cast<std::int32_t>(vectors.cols()));
    for (float v : vectors.row(i)) append_raw(bytes, v);
  }
  write_file(path, bytes);
}

void write_ivecs(const std::filesystem::path& path, const IdLists& lists) {
  std::string bytes;
  for (const auto& row : lists) {
    append_raw(bytes, static_cast<std::int32_t>(row.size()));
    for (std::int32_t v : row) append_raw(bytes, v);
  }
  write_file(path, bytes);
}

Dataset load_dataset(const std::filesystem::path& path, std::size_t limit) {
  Dataset ds;
  if (path.extension() == ".bvecs") {
    ds.format = VectorFormat::kBvecs;
    ds.vectors = read_bvecs(path, limit);
  } else {
    ds.format = VectorFormat::kFvecs;
    ds.vectors = read_fvecs(path, limit);
  }
  if (!ds.vectors.all_finite()) {
    throw InvalidData(path.string() + " contains NaN or Inf");
  }
  return ds;
}

GaussianMixture::GaussianMixture(std::size_t dim, std::size_t clusters,
                                 std::uint64_t seed, float centre_spread,
                                 float cluster_stddev)
    : centres_(clusters, dim), stddev_(cluster_stddev) {
  if (dim == 0 || clusters == 0) {
    throw InvalidArgument("GaussianMixture: dim and clusters must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, centre_spread);
  for (std::size_t c = 0; c < clusters; ++c) {
    for (auto& v : centres_.row(c)) v = gauss(rng);
  }
}

FloatMatrix GaussianMixture::sample(std::size_t n, std::uint64_t sample_seed) const {
  FloatMatrix out(n, centres_.cols());
  std::mt19937_64 rng(sample_seed);
  std::uniform_int_distribution<std::size_t> pick(0, centres_.rows() - 1);
  std::normal_distribution<float> gauss(0.0f, stddev_);
  for (std::size_t i = 0; i < n; ++i) {
    const auto centre = centres_.row(pick(rng));
    auto row = out.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] = centre[d] + gauss(rng);
  }
  return out;
}

double recall_at_k(std::span<const SearchResult> results,
                   const IdLists& ground_truth, std::size_t k) {
  if (k == 0) throw InvalidArgument("recall_at_k: k must be >= 1");
  if (results.size() != ground_truth.size()) {
    throw InvalidArgument("recall_at_k: " + std::to_string(results.size()) +
                          " results vs " + std::to_string(ground_truth.size()) +
                          " ground-truth rows");
  }
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    const auto& truth = ground_truth[q];
    if (truth.size() < k) {
      throw InvalidArgument("recall_at_k: k=" + std::to_string(k) +
                            " exceeds ground-truth depth " +
                            std::to_string(truth.size()));
    }
    const std::unordered_set<std::int64_t> expected(truth.begin(),
                                                    truth.begin() + static_cast<std::ptrdiff_t>(k));
    const auto& got = results[q].neighbors;
    const std::size_t n = std::min(k, got.size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      hit += expected.count(static_cast<std::int64_t>(got[i].id));
    }
    total += static_cast<double>(hit) / static_cast<double>(k);
  }
  return total / static_cast<double>(results.size());
}

IdLists brute_force_knn(const FloatMatrix& base, const FloatMatrix& queries,
                        std::size_t k) {
  if (base.cols() != queries.cols()) {
    throw InvalidArgument("brute_force_knn: dimension mismatch");
  }
  k = std::min(k, base.rows());
  IdLists out(queries.rows());
  if (k == 0) return out;

  const std::size_t keep = std::min(base.rows(), k + 64);
  const std::vector<float> base_norms = squared_norms(base);
  const float max_base_norm =
      base_norms.empty() ? 0.0f
                         : *std::max_element(base_norms.begin(), base_norms.end());
  // Bound on |decomposed - exact| for float Gram accumulation over D terms.
  const double eps = std::numeric_limits<float>::epsilon();
  const double rel = static_cast<double>(base.cols() + 8) * eps;

  constexpr std::size_t kQueryChunk = 256;
  constexpr std::size_t kBaseChunk = 16384;
  using Entry = std::pair<float, std::size_t>;
  for (std::size_t q0 = 0; q0 < queries.rows(); q0 += kQueryChunk) {
    const std::size_t nq = std::min(kQueryChunk, queries.rows() - q0);
    const FloatMatrix qchunk = queries.slice_rows(q0, nq);
    const std::vector<float> qnorms = squared_norms(qchunk);
    std::vector<std::vector<Entry>> heaps(nq);
    for (std::size_t b0 = 0; b0 < base.rows(); b0 += kBaseChunk) {
      const std::size_t nb = std::min(kBaseChunk, base.rows() - b0);
      const FloatMatrix dist = pairwise_l2(qchunk, base.slice_rows(b0, nb));
      for (std::size_t i = 0; i < nq; ++i) {
        auto& heap = heaps[i];
        const auto row = dist.row(i);
        for (std::size_t j = 0; j < nb; ++j) {
          const Entry e{row[j], b0 + j};
          if (heap.size() < keep) {
            heap.push_back(e);
            std::push_heap(heap.begin(), heap.end());
          } else if (e < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = e;
            std::push_heap(heap.begin(), heap.end());
          }
        }
      }
    }
    for (std::size_t i = 0; i < nq; ++i) {
      auto& heap = heaps[i];
      std::sort_heap(heap.begin(), heap.end());
      const double margin =
          rel * (static_cast<double>(qnorms[i]) + max_base_norm) + 1e-6;
      const double threshold = static_cast<double>(heap[k - 1].first) + 2 * margin;
      const auto query = queries.row(q0 + i);
      std::vector<Entry> exact;
      if (heap.size() == base.rows() || heap.back().first > threshold) {
        for (const auto& [approx, id] : heap) {
          if (approx <= threshold) {
            exact.emplace_back(exact_distance(query, base.row(id)), id);
          }
        }
      } else {
        // Shortlist might be incomplete; fall back to a full exact scan.
        for (std::size_t id = 0; id < base.rows(); ++id) {
          exact.emplace_back(exact_distance(query, base.row(id)), id);
        }
      }
      std::partial_sort(exact.begin(), exact.begin() + static_cast<std::ptrdiff_t>(k),
                        exact.end());
      auto& ids = out[q0 + i];
      for (std::size_t r = 0; r < k; ++r) {
        ids.push_back(static_cast<std::int32_t>(exact[r].second));
      }
    }
  }
  return out;
}

IdLists to_id_lists(std::span<const SearchResult> results) {
  IdLists out(results.size());
  for (std::size_t q = 0; q < results.size(); ++q) {
    for (const auto& n : results[q].neighbors) {
      out[q].push_back(static_cast<std::int32_t>(n.id));
    }
  }
  return out;
}

}  // namespace bitivf
