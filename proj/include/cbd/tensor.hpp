#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "cbd/errors.hpp"

namespace cbd {

// Dense row-major float32 tensor. The universal carrier for images,
// activations, weights and gradients.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0f);
  }

  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) throw InternalError("tensor shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (const int d : s) {
      if (d < 0) throw InternalError("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  float& at(std::initializer_list<int> idx) {
    return data[offset_of(idx)];
  }
  float at(std::initializer_list<int> idx) const {
    return data[offset_of(idx)];
  }

  std::size_t offset_of(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t d = 0;
    for (const int i : idx) {
      off = off * static_cast<std::size_t>(shape[d]) + static_cast<std::size_t>(i);
      ++d;
    }
    return off;
  }

  void fill(float v) {
    for (auto& x : data) x = v;
  }

  bool all_finite() const {
    for (const float x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const Tensor& other) const = default;
};

}  // namespace cbd
