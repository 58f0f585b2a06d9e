#include "bitivf/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <string>

#include "bitivf/error.hpp"

namespace bitivf {
namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * b[i];
  }
  return acc;
}

float l1_distance(std::span<const float> x, std::span<const float> c) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::fabs(x[i] - c[i]);
  return static_cast<float>(acc);
}

void check_dims(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InvalidArgument(std::string(what) + ": dimension mismatch " +
                          std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

BitCode sign_code(std::span<const float> x, std::span<const float> c) {
  check_dims(x.size(), c.size(), "sign_code");
  BitCode code(code_bytes(x.size()), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] - c[i] >= 0.0f) {
      code[i >> 3] = static_cast<std::uint8_t>(code[i >> 3] | (1u << (i & 7)));
    }
  }
  return code;
}

QuantizedEntry encode_residual(std::span<const float> rotated,
                               std::span<const float> centroid,
                               float precomputed_sq_norm, VectorId vector_id) {
  check_dims(rotated.size(), centroid.size(), "encode_residual");
  QuantizedEntry e;
  e.code = sign_code(rotated, centroid);
  e.cx = static_cast<float>(precomputed_sq_norm - dot(centroid, rotated));
  e.residual_l1 = l1_distance(rotated, centroid);
  e.vector_id = vector_id;
  return e;
}

std::vector<QuantizedEntry> encode_batch(const FloatMatrix& raw,
                                         const RotationMatrix& p,
                                         std::span<const ClusterId> assignments,
                                         const Centroids& centroids,
                                         std::span<const VectorId> ids) {
  const std::size_t n = raw.rows();
  if (assignments.size() != n || ids.size() != n) {
    throw InvalidArgument("encode_batch: assignments/ids length != rows");
  }
  check_dims(raw.cols(), p.dim, "encode_batch");
  check_dims(centroids.dim, p.dim, "encode_batch");
  for (ClusterId c : assignments) {
    if (c >= centroids.n_list) {
      throw InvalidArgument("encode_batch: cluster id " + std::to_string(c) +
                            " >= nList " + std::to_string(centroids.n_list));
    }
  }
  std::vector<QuantizedEntry> out(n);
  if (n == 0) return out;

  // Stage 1: norms need only the raw vectors.
  auto norms_job = std::async(std::launch::async,
                              [&raw] { return squared_norms(raw); });
  const FloatMatrix rotated = rotate(p, raw);
  const std::vector<float> norms = norms_job.get();

  // Stage 2: centroid dot products alongside sign/L1 extraction.
  auto dots_job = std::async(std::launch::async, [&] {
    std::vector<double> dots(n);
    for (std::size_t i = 0; i < n; ++i) {
      dots[i] = dot(centroids.centroid(assignments[i]), rotated.row(i));
    }
    return dots;
  });
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = centroids.centroid(assignments[i]);
    out[i].code = sign_code(rotated.row(i), c);
    out[i].residual_l1 = l1_distance(rotated.row(i), c);
    out[i].vector_id = ids[i];
  }
  const std::vector<double> dots = dots_job.get();
  for (std::size_t i = 0; i < n; ++i) {
    out[i].cx = static_cast<float>(norms[i] - dots[i]);
  }
  return out;
}

QueryContext quantize_query(std::span<const float> rotated_query,
                            std::span<const std::pair<ClusterId, float>> probed,
                            const Centroids& centroids, std::size_t query_id) {
  if (probed.empty()) throw InvalidArgument("quantize_query: empty probe list");
  check_dims(rotated_query.size(), centroids.dim, "quantize_query");

  std::vector<std::pair<ClusterId, float>> order(probed.begin(), probed.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });

  QueryContext ctx;
  ctx.query_id = query_id;
  ctx.probes.reserve(order.size());
  for (const auto& [cluster, distance] : order) {
    if (cluster >= centroids.n_list) {
      throw InvalidArgument("quantize_query: cluster id " +
                            std::to_string(cluster) + " out of range");
    }
    const auto c = centroids.centroid(cluster);
    ctx.probes.push_back(ProbeContext{cluster, distance,
                                      sign_code(rotated_query, c),
                                      l1_distance(rotated_query, c)});
  }
  return ctx;
}

}  // namespace bitivf
