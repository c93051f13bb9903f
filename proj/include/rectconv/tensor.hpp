#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rectconv/error.hpp"

namespace rectconv {

// Dense N x C x H x W float32 tensor, row-major.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : n_(n), c_(c), h_(h), w_(w) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      fail(ErrorCode::ShapeMismatch, "negative tensor dimension");
    }
    data_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
  }
  Tensor(int n, int c, int h, int w, std::vector<float> data)
      : n_(n), c_(c), h_(h), w_(w), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(n) * c * h * w) {
      fail(ErrorCode::ShapeMismatch, "tensor data length does not match its shape");
    }
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::array<int, 4> shape() const { return {n_, c_, h_, w_}; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }

  float& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  float at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  std::span<float> plane(int n, int c) {
    return {data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane_size(), plane_size()};
  }
  std::span<const float> plane(int n, int c) const {
    return {data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane_size(), plane_size()};
  }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape() == o.shape(); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.data_ == b.data_;
  }

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
  }

  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<float> data_;
};

inline std::string shape_string(const Tensor& t) {
  return std::to_string(t.n()) + "x" + std::to_string(t.c()) + "x" + std::to_string(t.h()) +
         "x" + std::to_string(t.w());
}

}  // namespace rectconv
