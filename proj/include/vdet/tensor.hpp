#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vdet/error.hpp"

namespace vdet {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major array. Images and feature maps use NCHW (or CHW for a
// single image).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw ConfigError("Tensor: data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& vector() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors (N, C, H, W).
  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size()) throw ConfigError("Tensor::reshaped: size mismatch");
    return Tensor(std::move(s), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (int d : shape_) {
      if (d < 0) throw ConfigError("Tensor: negative extent in " + shape_str(shape_));
    }
  }
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Slice sample n out of an NCHW batch as a 1xCxHxW tensor.
template <typename T>
Tensor<T> batch_item(const Tensor<T>& batch, int n) {
  Shape s = batch.shape();
  const std::size_t stride = batch.size() / static_cast<std::size_t>(s[0]);
  s[0] = 1;
  std::vector<T> out(batch.data() + n * stride, batch.data() + (n + 1) * stride);
  return Tensor<T>(std::move(s), std::move(out));
}

// Stack equally-shaped CHW tensors into an NCHW batch.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ConfigError("stack: no items");
  Shape s = items.front().shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  const std::size_t per = items.front().size();
  std::vector<T> data;
  data.reserve(per * items.size());
  for (const auto& t : items) {
    if (t.size() != per) throw ConfigError("stack: inconsistent item sizes");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  s.insert(s.begin(), static_cast<int>(items.size()));
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace vdet
