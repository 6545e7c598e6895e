#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <vector>

#include "flowkd/error.hpp"

namespace flowkd {

// Dense row-major tensor. Images are CHW, conv weights OIHW, matrices (rows,
// cols). Tensor(shape) zero-fills; uninit(shape) skips the fill for buffers
// that are fully overwritten (im2col panels, op outputs).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : Tensor(uninit(std::move(shape))) {
    std::fill(data_.get(), data_.get() + size_, T(0));
  }

  Tensor(std::vector<int> shape, T fill) : Tensor(uninit(std::move(shape))) {
    std::fill(data_.get(), data_.get() + size_, fill);
  }

  static Tensor uninit(std::vector<int> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = count(t.shape_);
    if (t.size_ > 0) t.data_ = std::make_unique_for_overwrite<T[]>(static_cast<size_t>(t.size_));
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data) {
    require(count(shape) == static_cast<int64_t>(data.size()), Err::ShapeMismatch,
            "tensor data does not match shape");
    Tensor t = uninit(std::move(shape));
    std::copy(data.begin(), data.end(), t.data_.get());
    return t;
  }

  Tensor(const Tensor& o) : shape_(o.shape_), size_(o.size_) {
    if (size_ > 0) {
      data_ = std::make_unique_for_overwrite<T[]>(static_cast<size_t>(size_));
      std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
    }
  }
  Tensor& operator=(const Tensor& o) {
    if (this != &o) *this = Tensor(o);
    return *this;
  }
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  // 2D (rows, cols)
  T& at(int r, int c) { return data_[static_cast<int64_t>(r) * dim(1) + c]; }
  const T& at(int r, int c) const { return data_[static_cast<int64_t>(r) * dim(1) + c]; }
  // 3D (c, y, x)
  T& at(int c, int y, int x) {
    return data_[(static_cast<int64_t>(c) * dim(1) + y) * dim(2) + x];
  }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<int64_t>(c) * dim(1) + y) * dim(2) + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.get(), data_.get() + size_, v); }

  bool all_finite() const {
    for (int64_t i = 0; i < size_; ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out = Tensor<U>::uninit(shape_);
    for (int64_t i = 0; i < size_; ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      require(d >= 0, Err::ShapeMismatch, "negative dimension");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  int64_t size_ = 0;
  std::unique_ptr<T[]> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "max_abs_diff shapes differ");
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * sizeof(T)) == 0;
}

}  // namespace flowkd
