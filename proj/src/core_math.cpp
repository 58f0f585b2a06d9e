#include "bitivf/core_math.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "bitivf/error.hpp"

namespace bitivf {
namespace {

// Nearest centre per row plus its distance; ties to the lowest index.
void nearest(const FloatMatrix& points, const FloatMatrix& centroids,
             std::size_t chunk_rows, std::vector<std::uint32_t>& labels,
             std::vector<float>& distances) {
  labels.assign(points.rows(), 0);
  distances.assign(points.rows(), 0.0f);
  chunk_rows = std::max<std::size_t>(chunk_rows, 1);
  for (std::size_t begin = 0; begin < points.rows(); begin += chunk_rows) {
    const std::size_t count = std::min(chunk_rows, points.rows() - begin);
    const FloatMatrix chunk = points.slice_rows(begin, count);
    const FloatMatrix dist = pairwise_l2(chunk, centroids);
    for (std::size_t i = 0; i < count; ++i) {
      auto row = dist.row(i);
      std::uint32_t best = 0;
      for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] < row[best]) best = static_cast<std::uint32_t>(j);
      }
      labels[begin + i] = best;
      distances[begin + i] = row[best];
    }
  }
}

}  // namespace

RotationMatrix generate_rotation(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw InvalidArgument("generate_rotation: dim must be >= 1");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = gauss(rng);
  }

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }

  RotationMatrix p{dim, FloatMatrix(dim, dim)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      p.matrix(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
          static_cast<float>(q(i, j));
    }
  }
  return p;
}

RotationMatrix identity_rotation(std::size_t dim) {
  RotationMatrix p{dim, FloatMatrix(dim, dim)};
  for (std::size_t i = 0; i < dim; ++i) p.matrix(i, i) = 1.0f;
  return p;
}

FloatMatrix multiply_transposed(const FloatMatrix& a, const FloatMatrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("multiply_transposed: column mismatch " +
                          std::to_string(a.cols()) + " vs " +
                          std::to_string(b.cols()));
  }
  const std::size_t n = a.rows();
  const std::size_t m = b.rows();
  const std::size_t depth = a.cols();
  FloatMatrix out(n, m);
  if (n == 0 || m == 0) return out;

  // bt is depth x m so the innermost loop runs over contiguous columns.
  std::vector<float> bt(depth * m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t k = 0; k < depth; ++k) bt[k * m + j] = b(j, k);
  }

  constexpr std::size_t kRowBlock = 4;
  constexpr std::size_t kColTile = 1024;
  for (std::size_t j0 = 0; j0 < m; j0 += kColTile) {
    const std::size_t width = std::min(kColTile, m - j0);
    for (std::size_t i0 = 0; i0 < n; i0 += kRowBlock) {
      const std::size_t rows = std::min(kRowBlock, n - i0);
      float* acc[kRowBlock];
      const float* lhs[kRowBlock];
      for (std::size_t r = 0; r < kRowBlock; ++r) {
        // Short trailing blocks alias their last row; only the first `rows`
        // pointers are written through.
        const std::size_t row = i0 + std::min(r, rows - 1);
        acc[r] = out.data() + row * m + j0;
        lhs[r] = a.data() + row * depth;
      }
      for (std::size_t k = 0; k < depth; ++k) {
        const float* __restrict src = bt.data() + k * m + j0;
        const float x0 = lhs[0][k], x1 = lhs[1][k], x2 = lhs[2][k],
                    x3 = lhs[3][k];
        float* __restrict c0 = acc[0];
        float* __restrict c1 = acc[1];
        float* __restrict c2 = acc[2];
        float* __restrict c3 = acc[3];
        if (rows == kRowBlock) {
          for (std::size_t j = 0; j < width; ++j) {
            c0[j] += x0 * src[j];
            c1[j] += x1 * src[j];
            c2[j] += x2 * src[j];
            c3[j] += x3 * src[j];
          }
        } else {
          for (std::size_t r = 0; r < rows; ++r) {
            float* __restrict c = acc[r];
            const float x = lhs[r][k];
            for (std::size_t j = 0; j < width; ++j) c[j] += x * src[j];
          }
        }
      }
    }
  }
  return out;
}

FloatMatrix rotate(const RotationMatrix& p, const FloatMatrix& v) {
  if (v.cols() != p.dim) {
    throw InvalidArgument("rotate: vector dim " + std::to_string(v.cols()) +
                          " != rotation dim " + std::to_string(p.dim));
  }
  return multiply_transposed(v, p.matrix);
}

std::vector<float> squared_norms(const FloatMatrix& v) {
  std::vector<float> out(v.rows());
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double acc = 0.0;
    for (float x : v.row(i)) acc += static_cast<double>(x) * x;
    out[i] = static_cast<float>(acc);
  }
  return out;
}

FloatMatrix pairwise_l2(const FloatMatrix& a, const FloatMatrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("pairwise_l2: column mismatch " +
                          std::to_string(a.cols()) + " vs " +
                          std::to_string(b.cols()));
  }
  // Gram block and norms are independent; aggregate afterwards.
  FloatMatrix out = multiply_transposed(a, b);
  const std::vector<float> na = squared_norms(a);
  const std::vector<float> nb = squared_norms(b);

  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      row[j] = std::max(0.0f, na[i] + nb[j] - 2.0f * row[j]);
    }
  }
  return out;
}

std::vector<std::uint32_t> assign_nearest(const FloatMatrix& points,
                                          const FloatMatrix& centroids,
                                          std::size_t chunk_rows) {
  if (centroids.rows() == 0) {
    throw InvalidArgument("assign_nearest: no centroids");
  }
  std::vector<std::uint32_t> labels;
  std::vector<float> distances;
  nearest(points, centroids, chunk_rows, labels, distances);
  return labels;
}

std::vector<std::size_t> sample_indices(std::size_t population,
                                        std::size_t count,
                                        std::uint64_t seed) {
  if (count > population) {
    throw InvalidArgument("sample_indices: count exceeds population");
  }
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` slots become the sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Centroids kmeans(const FloatMatrix& train, std::size_t n_list,
                 std::size_t max_iter, std::uint64_t seed,
                 KMeansReport* report) {
  if (n_list == 0) throw InvalidArgument("kmeans: nList must be >= 1");
  if (max_iter == 0) throw InvalidArgument("kmeans: max_iter must be >= 1");
  if (train.rows() < n_list) {
    throw InvalidArgument("kmeans: " + std::to_string(train.rows()) +
                          " training rows < nList " + std::to_string(n_list));
  }

  const std::size_t dim = train.cols();
  const auto init = sample_indices(train.rows(), n_list, seed);
  FloatMatrix centres = train.gather_rows(init);

  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> previous;
  std::vector<float> distances;
  KMeansReport local;

  for (std::size_t iter = 1; iter <= max_iter; ++iter) {
    nearest(train, centres, 16384, labels, distances);
    local.iterations = iter;
    local.objective.push_back(
        std::accumulate(distances.begin(), distances.end(), 0.0));
    if (labels == previous) {
      local.converged = true;
      break;
    }

    std::vector<double> sums(n_list * dim, 0.0);
    std::vector<std::size_t> counts(n_list, 0);
    for (std::size_t i = 0; i < train.rows(); ++i) {
      const std::size_t c = labels[i];
      ++counts[c];
      auto row = train.row(i);
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += row[d];
    }
    for (std::size_t c = 0; c < n_list; ++c) {
      if (counts[c] == 0) continue;
      auto out = centres.row(c);
      for (std::size_t d = 0; d < dim; ++d) {
        out[d] = static_cast<float>(sums[c * dim + d] /
                                    static_cast<double>(counts[c]));
      }
    }
    for (std::size_t c = 0; c < n_list; ++c) {
      if (counts[c] != 0) continue;
      // Re-seed from the worst-served point; zero its distance so a second
      // empty cluster picks a different one.
      const auto far = static_cast<std::size_t>(
          std::max_element(distances.begin(), distances.end()) -
          distances.begin());
      auto src = train.row(far);
      std::copy(src.begin(), src.end(), centres.row(c).begin());
      distances[far] = 0.0f;
    }
    previous = labels;
  }

  if (report != nullptr) *report = std::move(local);
  return Centroids{n_list, dim, std::move(centres)};
}

}  // namespace bitivf
