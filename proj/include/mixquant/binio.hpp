#pragma once

// Little-endian binary file primitives shared by the dataset, teacher-logit,
// and checkpoint containers.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace mixquant {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "io: cannot open '" + path + "' for writing");
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "io: cannot open '" + path + "' for reading");
  return f;
}

namespace detail_io {

template <typename T>
void write_le(std::ostream& o, T v) {
  unsigned char buf[sizeof(T)];
  std::uint64_t u = 0;
  std::memcpy(&u, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = (unsigned char)((u >> (8 * i)) & 0xff);
  o.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& what) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  require(bool(in), "io: truncated file reading " + what);
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    u |= std::uint64_t(buf[i]) << (8 * i);
  T v;
  std::memcpy(&v, &u, sizeof(T));
  return v;
}

}  // namespace detail_io

inline void write_u8(std::ostream& o, std::uint8_t v) { detail_io::write_le(o, v); }
inline void write_u32(std::ostream& o, std::uint32_t v) { detail_io::write_le(o, v); }
inline void write_u64(std::ostream& o, std::uint64_t v) { detail_io::write_le(o, v); }
inline void write_i32(std::ostream& o, std::int32_t v) { detail_io::write_le(o, v); }
inline void write_f32(std::ostream& o, float v) { detail_io::write_le(o, v); }

inline std::uint8_t read_u8(std::istream& i, const std::string& w = "u8") {
  return detail_io::read_le<std::uint8_t>(i, w);
}
inline std::uint32_t read_u32(std::istream& i, const std::string& w = "u32") {
  return detail_io::read_le<std::uint32_t>(i, w);
}
inline std::uint64_t read_u64(std::istream& i, const std::string& w = "u64") {
  return detail_io::read_le<std::uint64_t>(i, w);
}
inline std::int32_t read_i32(std::istream& i, const std::string& w = "i32") {
  return detail_io::read_le<std::int32_t>(i, w);
}
inline float read_f32(std::istream& i, const std::string& w = "f32") {
  return detail_io::read_le<float>(i, w);
}

inline void write_f32_array(std::ostream& o, const float* v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) write_f32(o, v[i]);
}

inline void read_f32_array(std::istream& in, float* v, std::size_t n,
                           const std::string& what = "f32 array") {
  for (std::size_t i = 0; i < n; ++i) v[i] = read_f32(in, what);
}

inline void write_magic(std::ostream& o, const char magic[4]) {
  o.write(magic, 4);
}

inline void expect_magic(std::istream& in, const char magic[4],
                         const std::string& path) {
  char buf[4];
  in.read(buf, 4);
  require(bool(in) && std::memcmp(buf, magic, 4) == 0,
          "io: '" + path + "' is not a " +
              std::string(magic, 4) + " file");
}

inline std::vector<char> read_all(const std::string& path) {
  auto f = open_in(path);
  f.seekg(0, std::ios::end);
  const auto n = f.tellg();
  f.seekg(0);
  std::vector<char> out(static_cast<std::size_t>(n), '\0');
  f.read(out.data(), n);
  require(bool(f), "io: failed reading '" + path + "'");
  return out;
}

inline bool file_exists(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return f.good();
}

}  // namespace mixquant
