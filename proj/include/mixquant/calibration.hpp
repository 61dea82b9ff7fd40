#pragma once

// Data-driven quantizer range initialization. Four methods over a sample
// buffer: max|x|, 2*mean|x|, gaussian max(mu+3s, |mu-3s|), and nearest-rank
// percentile of |x|. The step follows as d = q_max / 2^bits.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "quantizer.hpp"

namespace mixquant {

enum class CalibKind { max, two_mean, gaussian, percentile };

struct CalibMethod {
  CalibKind kind = CalibKind::max;
  double percentile = 100.0;

  static CalibMethod parse(const std::string& s) {
    if (s == "max") return {CalibKind::max, 100.0};
    if (s == "two_mean") return {CalibKind::two_mean, 100.0};
    if (s == "gaussian") return {CalibKind::gaussian, 100.0};
    if (!s.empty() && s[0] == 'p') {
      double p = 0.0;
      try {
        p = std::stod(s.substr(1));
      } catch (const std::exception&) {
        fail("calibration: unknown method '" + s + "'");
      }
      require(p > 0.0 && p <= 100.0,
              "calibration: percentile must lie in (0, 100], got '" + s + "'");
      return {CalibKind::percentile, p};
    }
    fail("calibration: unknown method '" + s + "'");
  }

  std::string name() const {
    switch (kind) {
      case CalibKind::max: return "max";
      case CalibKind::two_mean: return "two_mean";
      case CalibKind::gaussian: return "gaussian";
      case CalibKind::percentile: {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "p%.10g", percentile);
        return buf;
      }
    }
    fail("calibration: bad method kind");
  }
};

// The method grid used by the calibration-grid experiment.
inline std::vector<CalibMethod> calibration_method_grid() {
  return {CalibMethod::parse("max"),      CalibMethod::parse("two_mean"),
          CalibMethod::parse("gaussian"), CalibMethod::parse("p99.9"),
          CalibMethod::parse("p99.99"),   CalibMethod::parse("p99.999"),
          CalibMethod::parse("p99.9999")};
}

struct CalibResult {
  double d = 0.0;
  double q_max = 0.0;
};

namespace detail {

inline double nearest_rank_abs(const float* x, std::size_t n, double pct,
                               std::vector<float>& scratch) {
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = std::fabs(x[i]);
  std::size_t k = std::size_t(std::ceil(pct / 100.0 * double(n)));
  if (k < 1) k = 1;
  if (k > n) k = n;
  std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
  return double(scratch[k - 1]);
}

}  // namespace detail

inline CalibResult calibrate(const float* x, std::size_t n, CalibMethod m,
                             int target_bits, const std::string& context = "") {
  const std::string where = context.empty() ? "" : " (" + context + ")";
  require(n > 0, "calibration: empty sample set" + where);
  require(target_bits >= 1, "calibration: target_bits must be >= 1" + where);

  double q = 0.0;
  switch (m.kind) {
    case CalibKind::max: {
      for (std::size_t i = 0; i < n; ++i) q = std::max(q, double(std::fabs(x[i])));
      break;
    }
    case CalibKind::two_mean: {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += double(std::fabs(x[i]));
      q = 2.0 * acc / double(n);
      break;
    }
    case CalibKind::gaussian: {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += double(x[i]);
      mu /= double(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = double(x[i]) - mu;
        var += dx * dx;
      }
      var /= double(n);
      const double sigma = std::sqrt(var);
      q = std::max(mu + 3.0 * sigma, std::fabs(mu - 3.0 * sigma));
      break;
    }
    case CalibKind::percentile: {
      std::vector<float> scratch;
      q = detail::nearest_rank_abs(x, n, m.percentile, scratch);
      break;
    }
  }
  require(q > 0.0, "calibration: degenerate (all-zero) sample set" + where);
  return {std::ldexp(q, -target_bits), q};
}

template <typename T>
CalibResult calibrate(const Tensor<T>& samples, CalibMethod m, int target_bits,
                      const std::string& context = "") {
  static_assert(std::is_same_v<T, float>, "calibration runs on float samples");
  return calibrate(samples.data.data(), samples.size(), m, target_bits, context);
}

// Per-slice initialization: slices are contiguous leading-axis blocks of the
// sample buffer (the weight tensor itself, or a recorded activation).
inline void calibrate_quantizer(QuantizerState& q, const float* data,
                                std::size_t n, CalibMethod m, int target_bits) {
  require(!q.frozen, "calibration: quantizer " + q.name + " is frozen");
  require(n > 0 && n % std::size_t(q.slices) == 0,
          "calibration: sample count not divisible into slices for " + q.name);
  const std::size_t per = n / std::size_t(q.slices);
  for (int s = 0; s < q.slices; ++s) {
    const auto r = calibrate(data + std::size_t(s) * per, per, m, target_bits,
                             q.name + " slice " + std::to_string(s));
    q.set_slice(s, r.d, r.q_max);
  }
}

template <typename T>
void calibrate_quantizer(QuantizerState& q, const Tensor<T>& samples,
                         CalibMethod m, int target_bits) {
  static_assert(std::is_same_v<T, float>, "calibration runs on float samples");
  calibrate_quantizer(q, samples.data.data(), samples.size(), m, target_bits);
}

}  // namespace mixquant
