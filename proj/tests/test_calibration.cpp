// Range calibration: the Gaussian three-sigma estimator on large normal
// samples, nearest-rank percentiles against a full-sort oracle, scale
// equivariance, and method parsing.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mixquant/calibration.hpp"
#include "testutil.hpp"

using namespace mixquant;

TEST_CASE("gaussian calibration recovers three sigma on a large normal sample",
          "[calibration]") {
  // 10^6 standard normal draws: q_max must land within 2% of 3.0.
  auto x = testutil::gaussian_tensor<float>({1000, 1000}, 991);
  auto r = calibrate(x, CalibMethod::parse("gaussian"), 4);
  REQUIRE(r.q_max > 2.94);
  REQUIRE(r.q_max < 3.06);
  REQUIRE(r.d == Catch::Approx(r.q_max / 16.0));
}

TEST_CASE("percentile equals the full-sort oracle", "[calibration]") {
  for (std::size_t n : {std::size_t(1), std::size_t(7), std::size_t(100),
                        std::size_t(4093), std::size_t(100000)}) {
    auto x = testutil::random_tensor<float>({int(n)}, 1000 + int(n), -9.0f, 9.0f);
    for (const char* name : {"p50", "p90", "p99", "p99.9", "p99.99", "p100"}) {
      auto m = CalibMethod::parse(name);
      auto r = calibrate(x, m, 4);
      const double want =
          testutil::percentile_abs_oracle(x.data, m.percentile / 100.0);
      REQUIRE(r.q_max == want);
    }
  }
}

TEST_CASE("max and two_mean match direct formulas", "[calibration]") {
  auto x = Tensor<float>::from({6}, {1.0f, -4.0f, 2.0f, -0.5f, 3.0f, 0.25f});
  REQUIRE(calibrate(x, CalibMethod::parse("max"), 4).q_max == 4.0);
  const double mean_abs = (1.0 + 4.0 + 2.0 + 0.5 + 3.0 + 0.25) / 6.0;
  REQUIRE(calibrate(x, CalibMethod::parse("two_mean"), 4).q_max ==
          Catch::Approx(2.0 * mean_abs));
}

TEST_CASE("gaussian handles asymmetric shifts via the larger tail",
          "[calibration]") {
  // Shifted sample: mu = -2, sigma ~= 1; |mu - 3s| > mu + 3s.
  auto x = testutil::gaussian_tensor<float>({200000}, 992, -2.0f, 1.0f);
  auto r = calibrate(x, CalibMethod::parse("gaussian"), 4);
  REQUIRE(r.q_max == Catch::Approx(5.0).margin(0.1));
}

TEST_CASE("calibration is scale-equivariant", "[calibration]") {
  auto base = testutil::random_tensor<float>({5000}, 993, -2.0f, 2.0f);
  for (const char* name : {"max", "two_mean", "gaussian", "p99.9"}) {
    auto m = CalibMethod::parse(name);
    const auto r1 = calibrate(base, m, 4);
    for (float c : {0.01f, 1.0f, 100.0f}) {
      Tensor<float> scaled = base;
      for (auto& v : scaled.data) v *= c;
      const auto rc = calibrate(scaled, m, 4);
      REQUIRE(rc.q_max ==
              Catch::Approx(double(c) * r1.q_max).epsilon(2e-5));
      REQUIRE(rc.d == Catch::Approx(double(c) * r1.d).epsilon(2e-5));
    }
  }
}

TEST_CASE("step follows the range with an exact power-of-two divide",
          "[calibration]") {
  auto x = testutil::random_tensor<float>({64}, 994, -1.0f, 1.0f);
  for (int bits = 1; bits <= 16; ++bits) {
    auto r = calibrate(x, CalibMethod::parse("max"), bits);
    REQUIRE(r.d == std::ldexp(r.q_max, -bits));
  }
}

TEST_CASE("per-slice quantizer calibration uses leading-axis blocks",
          "[calibration]") {
  auto q = QuantizerState::make("w", Granularity::per_channel,
                                Signedness::signed_sym, 3);
  // Three slices with magnitudes ~1, ~2, ~4.
  Tensor<float> data({3, 8});
  for (int s = 0; s < 3; ++s)
    for (int e = 0; e < 8; ++e)
      data[std::size_t(s * 8 + e)] = float((e % 2 ? -1 : 1) * (1 << s)) *
                                     (0.5f + 0.0625f * float(e));
  calibrate_quantizer(q, data, CalibMethod::parse("max"), 4);
  for (int s = 0; s < 3; ++s) {
    float mx = 0;
    for (int e = 0; e < 8; ++e)
      mx = std::max(mx, std::abs(data[std::size_t(s * 8 + e)]));
    REQUIRE(q.range(s) == Catch::Approx(double(mx)).epsilon(1e-6));
    REQUIRE(q.effective_bits(s) == Catch::Approx(4.0).margin(1e-5));
  }
}

TEST_CASE("method parsing round-trips and rejects junk", "[calibration]") {
  for (const char* name :
       {"max", "two_mean", "gaussian", "p99.9", "p99.99", "p50"})
    REQUIRE(CalibMethod::parse(name).name() == name);
  REQUIRE_THROWS_AS(CalibMethod::parse("p0"), error);
  REQUIRE_THROWS_AS(CalibMethod::parse("p100.5"), error);
  REQUIRE_THROWS_AS(CalibMethod::parse("p"), error);
  REQUIRE_THROWS_AS(CalibMethod::parse("median"), error);
  REQUIRE_THROWS_AS(CalibMethod::parse(""), error);
}

TEST_CASE("the method grid holds the seven standard methods", "[calibration]") {
  auto grid = calibration_method_grid();
  REQUIRE(grid.size() == 7);
  REQUIRE(grid[0].name() == "max");
  REQUIRE(grid[6].name() == "p99.9999");
}

TEST_CASE("degenerate inputs are rejected", "[calibration]") {
  Tensor<float> zeros({16}, 0.0f);
  REQUIRE_THROWS_AS(calibrate(zeros, CalibMethod::parse("max"), 4), error);
  Tensor<float> ok({4}, 1.0f);
  REQUIRE_THROWS_AS(calibrate(ok.data.data(), 0, CalibMethod::parse("max"), 4),
                    error);
  REQUIRE_THROWS_AS(calibrate(ok, CalibMethod::parse("max"), 0), error);

  auto q = QuantizerState::make("t", Granularity::per_channel,
                                Signedness::signed_sym, 3);
  Tensor<float> bad({4}, 1.0f);  // 4 not divisible by 3 slices
  REQUIRE_THROWS_AS(calibrate_quantizer(q, bad, CalibMethod::parse("max"), 4),
                    error);
}
