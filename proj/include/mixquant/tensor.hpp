#pragma once

// Dense row-major tensor. Training runs at 32-bit; tests instantiate the
// 64-bit shadow for finite-difference oracles.

#include <cstddef>
#include <string>
#include <vector>

#include "common.hpp"

namespace mixquant {

template <typename T = float>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(count_elems(shape), fill);
  }

  static Tensor from(std::vector<int> s, std::vector<T> d) {
    Tensor t;
    std::size_t n = count_elems(s);
    require(n == d.size(), "tensor data length does not match shape");
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  static std::size_t count_elems(const std::vector<int>& s) {
    require(!s.empty(), "tensor shape must not be empty");
    std::size_t n = 1;
    for (int e : s) {
      require(e > 0, "tensor extent must be positive, got " + std::to_string(e));
      n *= std::size_t(e);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape[std::size_t(i)]; }
  int rank() const { return int(shape.size()); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

  void fill(T v) {
    for (auto& x : data) x = v;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace mixquant
