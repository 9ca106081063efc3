#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdcnas/errors.hpp"
#include "cdcnas/rng.hpp"

namespace cdcnas {

/// Extents of a dense (N, C, T, H, W) array.
struct Shape5 {
  std::array<std::int64_t, 5> dims{0, 0, 0, 0, 0};

  constexpr Shape5() = default;
  constexpr Shape5(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w)
      : dims{n, c, t, h, w} {}

  constexpr std::int64_t n() const { return dims[0]; }
  constexpr std::int64_t c() const { return dims[1]; }
  constexpr std::int64_t t() const { return dims[2]; }
  constexpr std::int64_t h() const { return dims[3]; }
  constexpr std::int64_t w() const { return dims[4]; }
  constexpr std::int64_t operator[](std::size_t i) const { return dims[i]; }

  /// Elements per (n, c) plane, i.e. T*H*W.
  constexpr std::int64_t volume() const { return dims[2] * dims[3] * dims[4]; }
  constexpr std::int64_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3] * dims[4]; }

  constexpr bool operator==(const Shape5&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << dims[0] << ',' << dims[1] << ',' << dims[2] << ',' << dims[3] << ',' << dims[4] << ')';
    return os.str();
  }
};

inline void require_same_shape(const Shape5& a, const Shape5& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + a.str() + " vs " + b.str());
}

/// Dense row-major 5-D tensor. Owns its storage; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(const Shape5& shape, T fill = T{0})
      : shape_(checked(shape)), data_(static_cast<std::size_t>(shape.numel()), fill) {}
  Tensor(const Shape5& shape, std::vector<T> data) : shape_(checked(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
    }
  }

  static Tensor zeros(const Shape5& s) { return Tensor(s); }
  static Tensor full(const Shape5& s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) { return Tensor(Shape5{1, 1, 1, 1, 1}, v); }
  static Tensor arange(const Shape5& s) {
    Tensor out(s);
    std::iota(out.data_.begin(), out.data_.end(), T{0});
    return out;
  }
  static Tensor randn(const Shape5& s, Rng& rng, double stddev = 1.0) {
    Tensor out(s);
    for (auto& v : out.data_) v = static_cast<T>(rng.normal() * stddev);
    return out;
  }
  static Tensor uniform(const Shape5& s, Rng& rng, double lo, double hi) {
    Tensor out(s);
    for (auto& v : out.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return out;
  }

  const Shape5& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) const {
    return (((n * shape_.c() + c) * shape_.t() + t) * shape_.h() + h) * shape_.w() + w;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(offset(n, c, t, h, w))];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(offset(n, c, t, h, w))];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T{0}); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(shape_, o.shape_, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor reshaped(const Shape5& s) const {
    if (s.numel() != shape_.numel()) throw ShapeError("reshape " + shape_.str() + " -> " + s.str());
    return Tensor(s, data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static const Shape5& checked(const Shape5& s) {
    for (auto d : s.dims) {
      if (d < 0) throw ShapeError("negative extent in " + s.str());
    }
    return s;
  }

  Shape5 shape_{};
  std::vector<T> data_;
};

/// Largest |a - b| over all elements.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// max |a - b| / max(1, max |b|): relative error with an absolute floor.
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_rel_diff");
  double scale = 1.0;
  for (std::int64_t i = 0; i < b.numel(); ++i) scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  return max_abs_diff(a, b) / scale;
}

}  // namespace cdcnas
