#pragma once

// Shared utilities: error type, the project-wide rounding mode, byte math,
// and the mixing functions behind every deterministic stream.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mixquant {

class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Single rounding mode project-wide: half away from zero (std::round).
template <typename T>
inline T round_away(T x) {
  return std::round(x);
}

constexpr std::uint64_t kMebibyte = 1ull << 20;  // MB meaning 2^20 in all reports

inline std::uint64_t ceil_div_u64(std::uint64_t a, std::uint64_t b) {
  return (a + b - 1) / b;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

// FNV-1a over raw bytes; used for state hashing (freeze verification, tests).
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace mixquant
