#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gqvae/core/error.hpp"

namespace gqvae::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// 64-byte aligned allocation, so the alignment of every row inside an array
/// depends only on its shape and vectorised kernels take identical paths on
/// identical inputs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

template <typename T>
using MatrixMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Dense row-major n-d array. Most kernels treat it as a matrix whose column
/// count is the last extent and whose row count is the product of the rest.
template <typename T>
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Array(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("array data holds " + std::to_string(data_.size()) +
                       " values but shape " + shape_string(shape_) +
                       " needs " + std::to_string(shape_size(shape_)));
    }
  }

  static Array scalar(T v) { return Array(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  Storage<T>& storage() { return data_; }
  const Storage<T>& storage() const { return data_; }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on array of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  MatrixMap<T> matrix() { return MatrixMap<T>(data_.data(), rows(), cols()); }
  ConstMatrixMap<T> matrix() const {
    return ConstMatrixMap<T>(data_.data(), rows(), cols());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Array<U> cast() const {
    return Array<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) +
                     " vs " + shape_string(b));
  }
}

}  // namespace gqvae::nn
