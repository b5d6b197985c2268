// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace graphfree::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape &shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s += (i ? ", " : "") + std::to_string(shape[i]);
  }
  return s + "]";
}

class ShapeError : public std::invalid_argument {
public:
  ShapeError(const std::string &op, const Shape &a, const Shape &b)
      : std::invalid_argument(op + ": incompatible shapes " + shape_string(a) + " and " +
                              shape_string(b)) {}
  using std::invalid_argument::invalid_argument;
};

/// Cache-line aligned storage. Vectorized kernels pick their code path from
/// the buffer alignment, so a fixed alignment keeps results bit-identical
/// between runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U> &) noexcept {}

  T *allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlignment - 1) / kAlignment * kAlignment;
    void *p = std::aligned_alloc(kAlignment, bytes == 0 ? kAlignment : bytes);
    if (p == nullptr) {
      throw std::bad_alloc();
    }
    return static_cast<T *>(p);
  }
  void deallocate(T *p, std::size_t) noexcept { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U> &) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. A rank-0 shape holds a single scalar.
template <typename T>
struct Array {
  Shape shape;
  Buffer<T> data;

  Array() = default;
  explicit Array(Shape s, T fill = T{}) : shape(std::move(s)), data(element_count(shape), fill) {}
  Array(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_length();
  }
  Array(Shape s, const std::vector<T> &d) : shape(std::move(s)), data(d.begin(), d.end()) {
    check_length();
  }
  Array(Shape s, std::initializer_list<T> d) : shape(std::move(s)), data(d) { check_length(); }

  void check_length() const {
    if (data.size() != element_count(shape)) {
      throw ShapeError("array data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  /// Extent of the last axis (1 for scalars).
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  T &operator[](std::size_t i) { return data[i]; }
  const T &operator[](std::size_t i) const { return data[i]; }
  T &at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T &at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  T item() const {
    if (size() != 1) {
      throw ShapeError("item() on array of shape " + shape_string(shape));
    }
    return data[0];
  }

  bool operator==(const Array &) const = default;
};

template <typename To, typename From>
Array<To> cast(const Array<From> &a) {
  Array<To> out;
  out.shape = a.shape;
  out.data.assign(a.data.begin(), a.data.end());
  return out;
}

} // namespace graphfree::nn
