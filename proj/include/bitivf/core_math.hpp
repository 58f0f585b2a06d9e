#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitivf/matrix.hpp"

namespace bitivf {

// Random orthogonal D x D matrix, applied to every vector as x_hat = P x.
struct RotationMatrix {
  std::size_t dim = 0;
  FloatMatrix matrix;  // dim x dim, row-major

  friend bool operator==(const RotationMatrix&, const RotationMatrix&) = default;
};

// nList cluster centres stored in rotated space.
struct Centroids {
  std::size_t n_list = 0;
  std::size_t dim = 0;
  FloatMatrix matrix;  // n_list x dim

  std::span<const float> centroid(std::size_t i) const { return matrix.row(i); }

  friend bool operator==(const Centroids&, const Centroids&) = default;
};

// QR of a seeded standard-Gaussian matrix with R's diagonal forced positive,
// so the result is a unique function of (dim, seed).
RotationMatrix generate_rotation(std::size_t dim, std::uint64_t seed);

RotationMatrix identity_rotation(std::size_t dim);

// out(i, j) = A_i . B_j, accumulated in float over ascending k. Each output
// row depends only on the matching row of `a`, so results do not change with
// batch composition or chunking.
FloatMatrix multiply_transposed(const FloatMatrix& a, const FloatMatrix& b);

// Row i of the result is P * V.row(i).
FloatMatrix rotate(const RotationMatrix& p, const FloatMatrix& v);

std::vector<float> squared_norms(const FloatMatrix& v);

// out(i, j) = |A_i|^2 + |B_j|^2 - 2 A_i . B_j. The Gram block is a single
// matrix product; norms are computed separately and folded in afterwards.
FloatMatrix pairwise_l2(const FloatMatrix& a, const FloatMatrix& b);

// Index of the nearest row of `centroids` for every row of `points`; ties go
// to the lowest index. Processes `points` in chunks of `chunk_rows` so the
// distance matrix stays bounded.
std::vector<std::uint32_t> assign_nearest(const FloatMatrix& points,
                                          const FloatMatrix& centroids,
                                          std::size_t chunk_rows = 16384);

struct KMeansReport {
  std::size_t iterations = 0;
  bool converged = false;
  // Sum of squared assignment distances after each assignment step.
  std::vector<double> objective;
};

// Lloyd's algorithm. Initial centres are nList distinct rows sampled with
// `seed`; empty clusters are re-seeded from the point farthest from its
// centre. Stops after max_iter iterations or when no assignment changes.
Centroids kmeans(const FloatMatrix& train, std::size_t n_list,
                 std::size_t max_iter, std::uint64_t seed,
                 KMeansReport* report = nullptr);

// `count` distinct indices from [0, population), in ascending order.
std::vector<std::size_t> sample_indices(std::size_t population,
                                        std::size_t count,
                                        std::uint64_t seed);

}  // namespace bitivf
