#pragma once

// Deterministic counter-based random streams. Every draw is a pure function
// of (seed, purpose, ids, counter), so values are independent of evaluation
// order and bit-stable across platforms and standard libraries.

#include <cstdint>
#include <cmath>
#include <numbers>
#include <vector>

#include "common.hpp"

namespace mixquant {

enum class RngPurpose : std::uint64_t {
  weight_init = 1,
  data_shuffle = 2,
  augmentation = 3,
  grad_noise = 4,
  synthetic_data = 5,
  general = 6,
};

inline std::uint64_t rng_key(std::uint64_t seed, RngPurpose purpose,
                             std::uint64_t a = 0, std::uint64_t b = 0,
                             std::uint64_t c = 0) {
  std::uint64_t k = splitmix64(seed);
  k = hash_mix(k, static_cast<std::uint64_t>(purpose));
  k = hash_mix(k, a);
  k = hash_mix(k, b);
  k = hash_mix(k, c);
  return k;
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : state_(key) {}
  RngStream(std::uint64_t seed, RngPurpose purpose, std::uint64_t a = 0,
            std::uint64_t b = 0, std::uint64_t c = 0)
      : state_(rng_key(seed, purpose, a, b, c)) {}

  std::uint64_t next_u64() { return splitmix64(state_++); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  // Standard normal via Box-Muller (no libc distribution dependence).
  double next_gaussian() {
    double u1;
    do {
      u1 = next_uniform();
    } while (u1 <= 0.0);
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

// One draw addressed by (key, index): used for per-element noise where the
// value must not depend on traversal order.
inline double keyed_uniform(std::uint64_t key, std::uint64_t index) {
  return double(splitmix64(hash_mix(key, index)) >> 11) * 0x1.0p-53;
}

inline double keyed_gaussian(std::uint64_t key, std::uint64_t index) {
  RngStream s(hash_mix(key, index));
  return s.next_gaussian();
}

inline double keyed_uniform_pm_half(std::uint64_t key, std::uint64_t index) {
  return keyed_uniform(key, index) - 0.5;
}

template <typename T>
inline void fisher_yates(std::vector<T>& v, RngStream& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = std::size_t(rng.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mixquant
