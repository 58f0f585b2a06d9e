#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace bitivf {

// Row-major dense matrix of 32-bit floats; vectors are rows.
class FloatMatrix {
 public:
  FloatMatrix() = default;
  FloatMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  // Takes ownership of `data`; throws InvalidArgument unless
  // data.size() == rows * cols.
  FloatMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<float> row(std::size_t i) noexcept {
    return {data_.data() + i * cols_, cols_};
  }
  std::span<const float> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  float& operator()(std::size_t i, std::size_t j) noexcept {
    return data_[i * cols_ + j];
  }
  float operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * cols_ + j];
  }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<const float> values() const noexcept { return data_; }

  // Copies rows [begin, begin + count).
  FloatMatrix slice_rows(std::size_t begin, std::size_t count) const;
  // Copies the listed rows in order.
  FloatMatrix gather_rows(std::span<const std::size_t> indices) const;

  bool all_finite() const noexcept;

  friend bool operator==(const FloatMatrix&, const FloatMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

}  // namespace bitivf
