// Size penalty: exact rectification at or under budget, exact quadratic
// overshoot values, the linear beta ramp, and knowledge-distillation
// configuration validation.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mixquant/penalty.hpp"
#include "testutil.hpp"

using namespace mixquant;

TEST_CASE("penalty is exactly zero at or under the target", "[penalty]") {
  const double target = 164787.0;
  for (double sum : {0.0, 1.0, target - 1000.0, target - 0.5, target}) {
    REQUIRE(rectified_quadratic_value(sum, target, 2e-6) == 0.0);

    Tape<float> t;
    auto* s = t.leaf(Tensor<float>::from({1}, {float(sum)}), true);
    auto* p = rectified_quadratic(t, s, target, 2e-6);
    REQUIRE(p->value[0] == 0.0f);
    t.backward(p);
    REQUIRE(s->grad[0] == 0.0f);  // gradient is exactly zero too
  }
}

TEST_CASE("overshoot penalty equals beta * delta^2 to float rounding",
          "[penalty]") {
  // Integer-valued sums and targets below 2^24 are exact in 32-bit floats,
  // so the tape chain must reproduce beta * delta^2 exactly.
  const double beta = 0.5;
  const double target = 100000.0;
  for (double delta : {1.0, 10.0, 1000.0}) {
    const double sum = target + delta;
    REQUIRE(rectified_quadratic_value(sum, target, beta) ==
            beta * delta * delta);

    Tape<float> t;
    auto* s = t.leaf(Tensor<float>::from({1}, {float(sum)}), true);
    auto* p = rectified_quadratic(t, s, target, beta);
    REQUIRE(p->value[0] == float(beta * delta * delta));

    // d penalty / d sum = 2 * beta * delta.
    t.backward(p);
    REQUIRE(s->grad[0] == Catch::Approx(2.0 * beta * delta).epsilon(1e-6));
  }
}

TEST_CASE("penalty value agrees between tape and closed form on random sums",
          "[penalty]") {
  mixquant::RngStream rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    const double target = 1000.0 + rng.next_uniform() * 100000.0;
    const double sum = target * (0.5 + rng.next_uniform());
    const double beta = rng.next_uniform() * 1e-3;

    Tape<double> t;
    auto* s = t.leaf(Tensor<double>::from({1}, {sum}), true);
    auto* p = rectified_quadratic(t, s, target, beta);
    REQUIRE(p->value[0] ==
            Catch::Approx(rectified_quadratic_value(sum, target, beta))
                .margin(1e-12));
  }
}

TEST_CASE("beta ramps linearly over 1-based steps and saturates", "[penalty]") {
  SizeBudget b;
  b.t_w_bits = 1000;
  b.t_a_bits = 1000;
  b.beta_final = 2e-6;
  b.ramp_steps = 200;
  b.validate();

  REQUIRE(b.beta_at(1) == Catch::Approx(2e-6 / 200.0));
  REQUIRE(b.beta_at(100) == Catch::Approx(1e-6));
  REQUIRE(b.beta_at(200) == 2e-6);  // reaches the final value exactly at ramp end
  REQUIRE(b.beta_at(201) == 2e-6);
  REQUIRE(b.beta_at(100000) == 2e-6);

  SizeBudget one;
  one.t_w_bits = one.t_a_bits = 1;
  one.beta_final = 5e-5;
  one.ramp_steps = 1;
  REQUIRE(one.beta_at(1) == 5e-5);  // a single-step ramp is immediate
}

TEST_CASE("budget validation rejects bad fields", "[penalty]") {
  SizeBudget b;
  b.t_w_bits = 0;
  b.t_a_bits = 10;
  b.beta_final = 1e-6;
  REQUIRE_THROWS_AS(b.validate(), error);
  b.t_w_bits = 10;
  b.t_a_bits = -1;
  REQUIRE_THROWS_AS(b.validate(), error);
  b.t_a_bits = 10;
  b.beta_final = -1e-9;
  REQUIRE_THROWS_AS(b.validate(), error);
  b.beta_final = 0.0;
  b.ramp_steps = 0;
  REQUIRE_THROWS_AS(b.validate(), error);
  b.ramp_steps = 1;
  REQUIRE_NOTHROW(b.validate());
}

TEST_CASE("penalty gradient direction shrinks the bit total", "[penalty]") {
  // Over budget, the gradient on the sum is positive, so a descent step
  // reduces the total; never the other way around.
  Tape<double> t;
  auto* s = t.leaf(Tensor<double>::from({1}, {1500.0}), true);
  auto* p = rectified_quadratic(t, s, 1000.0, 1e-4);
  t.backward(p);
  REQUIRE(s->grad[0] > 0.0);
  REQUIRE(s->grad[0] == Catch::Approx(2.0 * 1e-4 * 500.0));
}

TEST_CASE("kd mode parsing and config validation", "[penalty]") {
  REQUIRE(parse_kd_mode("off") == KDMode::off);
  REQUIRE(parse_kd_mode("soft_label") == KDMode::soft_label);
  REQUIRE(parse_kd_mode("penalty_hook") == KDMode::penalty_hook);
  REQUIRE_THROWS_AS(parse_kd_mode("hard"), error);
  for (KDMode m : {KDMode::off, KDMode::soft_label, KDMode::penalty_hook})
    REQUIRE(parse_kd_mode(kd_mode_name(m)) == m);

  KDConfig<float> kd;
  kd.mode = KDMode::penalty_hook;
  REQUIRE_THROWS_AS(kd.validate(), error);  // hook mode without a hook
  kd.hook = [](Tape<float>& t, NodePtr<float> logits) {
    return mul_scalar(t, sum(t, logits), 0.0f);
  };
  REQUIRE_NOTHROW(kd.validate());

  kd.temperature = 0.0;
  REQUIRE_THROWS_AS(kd.validate(), error);
  kd.temperature = 4.0;
  kd.kd_weight = -0.1;
  REQUIRE_THROWS_AS(kd.validate(), error);
}

TEST_CASE("penalty rejects non-scalar bit totals", "[penalty]") {
  Tape<float> t;
  auto* v = t.leaf(Tensor<float>({3}, 1.0f), true);
  REQUIRE_THROWS_AS(rectified_quadratic(t, v, 10.0, 1e-6), error);
}
