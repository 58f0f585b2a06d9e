#include "bitivf/raw_store.hpp"

#include <algorithm>
#include <string>

#include "bitivf/error.hpp"

namespace bitivf {

RawStore::RawStore(std::shared_ptr<const FloatMatrix> vectors,
                   std::vector<VectorId> ids)
    : vectors_(std::move(vectors)), ids_(std::move(ids)) {
  if (!vectors_) vectors_ = std::make_shared<const FloatMatrix>();
  if (!ids_.empty()) {
    if (ids_.size() != vectors_->rows()) {
      throw InvalidArgument("RawStore: id count != row count");
    }
    if (std::adjacent_find(ids_.begin(), ids_.end(), std::greater_equal<>()) !=
        ids_.end()) {
      throw InvalidArgument("RawStore: ids must be strictly ascending");
    }
  }
}

RawStore::RawStore(FloatMatrix vectors, std::vector<VectorId> ids)
    : RawStore(std::make_shared<const FloatMatrix>(std::move(vectors)),
               std::move(ids)) {}

std::span<const float> RawStore::fetch(VectorId id) const {
  if (ids_.empty()) {
    if (!vectors_ || id >= vectors_->rows()) {
      throw InternalError("raw store has no vector " + std::to_string(id));
    }
    return vectors_->row(static_cast<std::size_t>(id));
  }
  const auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) {
    throw InternalError("raw store has no vector " + std::to_string(id));
  }
  return vectors_->row(static_cast<std::size_t>(it - ids_.begin()));
}

}  // namespace bitivf
