#pragma once

#include <cstddef>
#include <algorithm>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "opcrash/numcore/memory.hpp"

namespace opcrash::numcore {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

/// Dense row-major tensor that owns its storage. Copies are deep; there are
/// no views.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackedAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::initializer_list<T> values);
  Tensor(Shape shape, std::span<const T> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return Tensor({rows, cols}, values);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const;

  /// Leading extent, and the product of the remaining extents.
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : size() / rows(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }
  T* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  void fill(T value);
  /// Same values under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(data_.begin(), data_.end(), other.data_.begin(), other.data_.end());
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Largest absolute elementwise difference; throws DimensionError on shape mismatch.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
bool all_finite(const Tensor<T>& t) noexcept;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace opcrash::numcore
