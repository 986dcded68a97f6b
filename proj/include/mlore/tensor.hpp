#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mlore {

/// Raised when an operator is called with arguments that break its contract
/// (shape mismatch, invalid configuration, wrong mode).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Dense rank-4 extent. For activations the order is (batch, channels,
/// height, width); conv kernels reuse it as (kh, kw, C_in, C_out).
using Shape = std::array<std::size_t, 4>;

inline std::size_t numel(const Shape& s) { return s[0] * s[1] * s[2] * s[3]; }

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(' << s[0] << ", " << s[1] << ", " << s[2] << ", " << s[3] << ')';
  return os.str();
}

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(numel(shape), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) {
      throw ContractError("Tensor: data length " + std::to_string(data_.size()) +
                          " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return ((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }
  T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) { return data_[offset(a, b, c, d)]; }
  const T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[offset(a, b, c, d)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (o.shape_ != shape_) {
      throw ContractError(std::string(what) + ": shape " + to_string(shape_) + " vs " + to_string(o.shape_));
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m = 0;
  for (T v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

/// ||a - b||_inf / ||b||_inf, with the denominator floored at the smallest
/// normal number so that two all-zero tensors compare as exactly equal.
template <typename T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_relative_error");
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    ref = std::max(ref, std::abs(static_cast<double>(b[i])));
  }
  if (diff == 0) return 0;
  return diff / std::max(ref, 1e-300);
}

}  // namespace mlore
