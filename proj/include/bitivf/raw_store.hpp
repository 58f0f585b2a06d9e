#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "bitivf/matrix.hpp"
#include "bitivf/quantizer.hpp"

namespace bitivf {

// Full-precision vectors addressed by global id, used for exact re-ranking.
class VectorSource {
 public:
  virtual ~VectorSource() = default;
  virtual std::size_t dim() const = 0;
  // Throws InternalError when `id` is not held.
  virtual std::span<const float> fetch(VectorId id) const = 0;
};

// Unrotated vectors kept outside the index. Without explicit ids, row i holds
// vector id i; otherwise `ids` (strictly ascending) names each row.
class RawStore final : public VectorSource {
 public:
  RawStore() = default;
  explicit RawStore(std::shared_ptr<const FloatMatrix> vectors,
                    std::vector<VectorId> ids = {});
  explicit RawStore(FloatMatrix vectors, std::vector<VectorId> ids = {});

  std::size_t dim() const override { return vectors_ ? vectors_->cols() : 0; }
  std::size_t size() const { return vectors_ ? vectors_->rows() : 0; }
  std::span<const float> fetch(VectorId id) const override;

  const FloatMatrix& vectors() const { return *vectors_; }
  std::span<const VectorId> ids() const { return ids_; }

 private:
  std::shared_ptr<const FloatMatrix> vectors_;
  std::vector<VectorId> ids_;
};

}  // namespace bitivf
