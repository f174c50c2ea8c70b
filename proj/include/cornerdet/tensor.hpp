#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cornerdet {

/// Raised on any extent or rank mismatch. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Image-like data is laid out N x C x H x W.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) {
      throw ShapeError("dimension " + std::to_string(i) + " out of range for shape " +
                       shape_str(shape_));
    }
    return shape_[i];
  }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// 4-d accessor (n, c, y, x).
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  /// 3-d accessor (c, y, x).
  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  /// Copy of batch entry `n` as a tensor with a leading extent of one.
  Tensor slice_batch(std::size_t n) const {
    Shape s = shape_;
    const std::size_t per = numel() / s.at(0);
    s[0] = 1;
    return Tensor(s, std::vector<T>(data_.begin() + n * per, data_.begin() + (n + 1) * per));
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

  bool operator==(const Tensor& o) const = default;

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor must have at least one dimension");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == 0) {
        throw ShapeError("extent of dimension " + std::to_string(i) + " must be >= 1 in " +
                         shape_str(s));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Stacks equally-shaped 3-d tensors [C,H,W] into [N,C,H,W].
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("cannot stack an empty batch");
  Shape s{items.size()};
  for (auto e : items.front().shape()) s.push_back(e);
  Tensor<T> out(s);
  const std::size_t per = items.front().numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape()) {
      throw ShapeError("batch item " + std::to_string(i) + " has shape " +
                       shape_str(items[i].shape()) + ", expected " +
                       shape_str(items.front().shape()));
    }
    std::copy(items[i].data().begin(), items[i].data().end(), out.ptr() + i * per);
  }
  return out;
}

}  // namespace cornerdet
