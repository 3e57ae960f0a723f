#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradshield/errors.hpp"

namespace gradshield {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

// Dense row-major array with an optional gradient slot. Images are NCHW.
template <typename T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  BasicTensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const noexcept { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // NCHW accessor; only valid for rank-4 tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  std::span<T> values() noexcept { return data; }
  std::span<const T> values() const noexcept { return data; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Copies sample `index` of an NCHW batch into a 1xCxHxW tensor.
template <typename T>
BasicTensor<T> batch_item(const BasicTensor<T>& batch, std::size_t index) {
  const std::size_t stride = batch.size() / batch.dim(0);
  Shape s = batch.shape;
  s[0] = 1;
  return BasicTensor<T>(s, std::vector<T>(batch.data.begin() + index * stride,
                                          batch.data.begin() + (index + 1) * stride));
}

// Stacks equally shaped 1xCxHxW tensors into an NxCxHxW batch.
template <typename T>
BasicTensor<T> stack_batch(std::span<const BasicTensor<T>> items) {
  if (items.empty()) throw ShapeError("stack_batch: empty input");
  Shape s = items.front().shape;
  s[0] = 0;
  std::vector<T> values;
  for (const auto& it : items) {
    if (it.rank() != s.size() || it.dim(0) != 1 ||
        !std::equal(it.shape.begin() + 1, it.shape.end(), s.begin() + 1)) {
      throw ShapeError("stack_batch: item shape " + shape_str(it.shape) + " does not match " +
                       shape_str(items.front().shape));
    }
    values.insert(values.end(), it.data.begin(), it.data.end());
    ++s[0];
  }
  return BasicTensor<T>(s, std::move(values));
}

// Repeats a 1xCxHxW tensor n times along the batch axis.
template <typename T>
BasicTensor<T> tile_batch(const BasicTensor<T>& item, std::size_t n) {
  Shape s = item.shape;
  s[0] = n;
  std::vector<T> values;
  values.reserve(item.size() * n);
  for (std::size_t i = 0; i < n; ++i) values.insert(values.end(), item.data.begin(), item.data.end());
  return BasicTensor<T>(s, std::move(values));
}

}  // namespace gradshield
