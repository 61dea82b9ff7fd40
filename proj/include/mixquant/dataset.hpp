#pragma once

// Small-image classification data: an 8-bit binary container (MQDS), a
// deterministic synthetic generator (per-class smooth templates plus pixel
// noise), training augmentation (horizontal flip, 1-px-pad random crop), and
// float batch assembly with (x - 127)/128 normalization. Teacher logits ride
// in a separate MQTL container.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "binio.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mixquant {

struct Dataset {
  int channels = 0, h = 0, w = 0, classes = 0;
  std::vector<std::uint8_t> pixels;  // count * channels * h * w
  std::vector<std::uint8_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t sample_elems() const {
    return std::size_t(channels) * std::size_t(h) * std::size_t(w);
  }
  const std::uint8_t* sample(std::size_t i) const {
    return pixels.data() + i * sample_elems();
  }

  void validate() const {
    require(channels >= 1 && h >= 1 && w >= 1 && classes >= 2,
            "dataset: bad geometry");
    require(pixels.size() == count() * sample_elems(),
            "dataset: pixel payload size mismatch");
    for (auto l : labels)
      require(l < classes, "dataset: label out of range");
  }
};

inline void save_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  auto f = open_out(path);
  write_magic(f, "MQDS");
  write_u32(f, 1);
  write_u32(f, std::uint32_t(ds.count()));
  write_u32(f, std::uint32_t(ds.channels));
  write_u32(f, std::uint32_t(ds.h));
  write_u32(f, std::uint32_t(ds.w));
  write_u32(f, std::uint32_t(ds.classes));
  f.write(reinterpret_cast<const char*>(ds.pixels.data()),
          std::streamsize(ds.pixels.size()));
  f.write(reinterpret_cast<const char*>(ds.labels.data()),
          std::streamsize(ds.labels.size()));
  require(f.good(), "dataset: write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  auto f = open_in(path);
  expect_magic(f, "MQDS", path);
  const auto version = read_u32(f, "version");
  require(version == 1, "dataset: unsupported version in '" + path + "'");
  Dataset ds;
  const auto n = read_u32(f, "count");
  ds.channels = int(read_u32(f, "channels"));
  ds.h = int(read_u32(f, "h"));
  ds.w = int(read_u32(f, "w"));
  ds.classes = int(read_u32(f, "classes"));
  require(ds.channels >= 1 && ds.h >= 1 && ds.w >= 1 && ds.classes >= 2,
          "dataset: bad geometry in '" + path + "'");
  ds.pixels.resize(std::size_t(n) * std::size_t(ds.channels) *
                   std::size_t(ds.h) * std::size_t(ds.w));
  f.read(reinterpret_cast<char*>(ds.pixels.data()),
         std::streamsize(ds.pixels.size()));
  require(bool(f), "dataset: truncated pixels in '" + path + "'");
  ds.labels.resize(n);
  f.read(reinterpret_cast<char*>(ds.labels.data()), std::streamsize(n));
  require(bool(f), "dataset: truncated labels in '" + path + "'");
  ds.validate();
  return ds;
}

// Per-class, per-channel smooth sinusoid templates; samples add pixel noise.
// split_tag separates train/eval draws under one seed.
inline Dataset make_synthetic_dataset(std::uint64_t seed, int count,
                                      int classes, int channels, int hw,
                                      std::uint64_t split_tag) {
  require(count >= classes, "synthetic data: need at least one sample/class");
  Dataset ds;
  ds.channels = channels;
  ds.h = hw;
  ds.w = hw;
  ds.classes = classes;
  ds.pixels.resize(std::size_t(count) * ds.sample_elems());
  ds.labels.resize(std::size_t(count));

  struct Wave {
    double fx1, fy1, p1, fx2, fy2, p2;
  };
  std::vector<Wave> waves(std::size_t(classes) * std::size_t(channels));
  for (int c = 0; c < classes; ++c)
    for (int ch = 0; ch < channels; ++ch) {
      RngStream rs(rng_key(seed, RngPurpose::synthetic_data, std::uint64_t(c),
                           std::uint64_t(ch)));
      Wave& w = waves[std::size_t(c) * std::size_t(channels) + std::size_t(ch)];
      w.fx1 = double(1 + rs.next_below(3));
      w.fy1 = double(1 + rs.next_below(3));
      w.p1 = rs.next_uniform(0.0, 6.283185307179586);
      w.fx2 = double(1 + rs.next_below(4));
      w.fy2 = double(1 + rs.next_below(4));
      w.p2 = rs.next_uniform(0.0, 6.283185307179586);
    }

  const double tau = 6.283185307179586;
  for (int i = 0; i < count; ++i) {
    const int cls = i % classes;
    ds.labels[std::size_t(i)] = std::uint8_t(cls);
    RngStream noise(rng_key(seed, RngPurpose::synthetic_data, split_tag,
                            0x1000000ull + std::uint64_t(i)));
    std::uint8_t* px = ds.pixels.data() + std::size_t(i) * ds.sample_elems();
    for (int ch = 0; ch < channels; ++ch) {
      const Wave& w =
          waves[std::size_t(cls) * std::size_t(channels) + std::size_t(ch)];
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const double u = double(x) / double(hw);
          const double v = double(y) / double(hw);
          double val = 127.0 +
                       60.0 * std::sin(tau * (w.fx1 * u + w.fy1 * v) + w.p1) +
                       40.0 * std::sin(tau * (w.fx2 * u + w.fy2 * v) + w.p2);
          val += noise.next_gaussian() * 20.0;
          int q = int(std::lround(val));
          q = q < 0 ? 0 : (q > 255 ? 255 : q);
          *px++ = std::uint8_t(q);
        }
    }
  }
  ds.validate();
  return ds;
}

// ---- Batch assembly --------------------------------------------------------

// Horizontal flip then 1-px zero-pad random crop, both drawn from `key`;
// writes normalized floats into out (C,H,W block for one sample).
inline void assemble_sample(const Dataset& ds, std::size_t index, bool augment,
                            std::uint64_t key, float* out) {
  const int C = ds.channels, H = ds.h, W = ds.w;
  bool flip = false;
  int dx = 0, dy = 0;
  if (augment) {
    RngStream rs(key);
    flip = rs.next_below(2) == 1;
    dx = int(rs.next_below(3)) - 1;
    dy = int(rs.next_below(3)) - 1;
  }
  const std::uint8_t* src = ds.sample(index);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = y + dy;
        int sx = x + dx;
        float v = 0.0f;
        if (sy >= 0 && sy < H && sx >= 0 && sx < W) {
          if (flip) sx = W - 1 - sx;
          v = float(src[(std::size_t(c) * H + std::size_t(sy)) * W +
                        std::size_t(sx)]);
        }
        *out++ = (v - 127.0f) / 128.0f;
      }
}

struct Batch {
  Tensor<float> x;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // dataset indices, for teacher lookup
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& idx,
                        bool augment, std::uint64_t aug_key_base) {
  Batch b;
  const int N = int(idx.size());
  b.x = Tensor<float>({N, ds.channels, ds.h, ds.w});
  b.labels.resize(idx.size());
  b.indices = idx;
  const std::size_t per = ds.sample_elems();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    assemble_sample(ds, idx[i], augment, hash_mix(aug_key_base, idx[i]),
                    b.x.data.data() + i * per);
    b.labels[i] = int(ds.labels[idx[i]]);
  }
  return b;
}

// ---- Teacher logits --------------------------------------------------------

struct TeacherLogits {
  int classes = 0;
  std::vector<float> rows;  // count * classes

  std::size_t count() const {
    return classes == 0 ? 0 : rows.size() / std::size_t(classes);
  }
  Tensor<float> gather(const std::vector<std::size_t>& idx) const {
    Tensor<float> t({int(idx.size()), classes});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < count(), "teacher logits: sample index out of range");
      for (int k = 0; k < classes; ++k)
        t[i * std::size_t(classes) + std::size_t(k)] =
            rows[idx[i] * std::size_t(classes) + std::size_t(k)];
    }
    return t;
  }
};

inline void save_teacher_logits(const std::string& path,
                                const TeacherLogits& tl) {
  auto f = open_out(path);
  write_magic(f, "MQTL");
  write_u32(f, std::uint32_t(tl.count()));
  write_u32(f, std::uint32_t(tl.classes));
  write_f32_array(f, tl.rows.data(), tl.rows.size());
  require(f.good(), "teacher logits: write failed for '" + path + "'");
}

inline TeacherLogits load_teacher_logits(const std::string& path) {
  auto f = open_in(path);
  expect_magic(f, "MQTL", path);
  const auto n = read_u32(f, "count");
  TeacherLogits tl;
  tl.classes = int(read_u32(f, "classes"));
  require(tl.classes >= 2, "teacher logits: bad class count in '" + path + "'");
  tl.rows.resize(std::size_t(n) * std::size_t(tl.classes));
  read_f32_array(f, tl.rows.data(), tl.rows.size(), "teacher rows");
  return tl;
}

}  // namespace mixquant
