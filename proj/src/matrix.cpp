#include "bitivf/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bitivf/error.hpp"

namespace bitivf {

FloatMatrix::FloatMatrix(std::size_t rows, std::size_t cols,
                         std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InvalidArgument("FloatMatrix: data length " +
                          std::to_string(data_.size()) + " != " +
                          std::to_string(rows_) + " x " + std::to_string(cols_));
  }
}

FloatMatrix FloatMatrix::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) {
    throw InvalidArgument("FloatMatrix::slice_rows: range out of bounds");
  }
  FloatMatrix out(count, cols_);
  std::copy_n(data_.data() + begin * cols_, count * cols_, out.data());
  return out;
}

FloatMatrix FloatMatrix::gather_rows(std::span<const std::size_t> indices) const {
  FloatMatrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) {
      throw InvalidArgument("FloatMatrix::gather_rows: row index out of bounds");
    }
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

bool FloatMatrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

}  // namespace bitivf
