// The trainable mini model: pinned structural counts, deterministic
// initialization, quantized/float forward consistency, activation recording,
// loss assembly with the size penalty, freezing, and the calibration grid.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mixquant/model.hpp"
#include "mixquant/penalty.hpp"
#include "testutil.hpp"

using namespace mixquant;

namespace {

MiniConfig default_cfg() { return MiniConfig{}; }

MiniConfig tiny_cfg() {
  MiniConfig c;
  c.input_hw = 8;
  c.stem_width = 8;
  c.stages = {{12, 1, 2, 2}, {16, 1, 2, 2}};
  return c;
}

Tensor<float> tiny_batch(int n, const MiniConfig& c, std::uint64_t seed) {
  return testutil::random_tensor<float>(
      {n, c.input_channels, c.input_hw, c.input_hw}, seed, -1.0f, 1.0f);
}

}  // namespace

TEST_CASE("default mini model pins its structural counts", "[model]") {
  auto m = build_mini_model(default_cfg(), 1);
  REQUIRE(m.param_count() == 53986);
  REQUIRE(m.quants.size() == 35);
  std::size_t weight_q = 0, act_q = 0;
  for (std::size_t i = 0; i < m.quants.size(); ++i)
    (m.q_is_weight[i] ? weight_q : act_q)++;
  REQUIRE(weight_q == 17);
  REQUIRE(act_q == 18);
  REQUIRE(m.weight_elems_total() == 51496);
  REQUIRE(m.act_elems_total() == 35648);
  REQUIRE(m.blocks.size() == 5);  // depths 1 + 2 + 2
  REQUIRE(m.conv_units().size() == 16);  // stem + 3 per block
}

TEST_CASE("initialization is seed-deterministic", "[model]") {
  auto a = build_mini_model(tiny_cfg(), 11);
  auto b = build_mini_model(tiny_cfg(), 11);
  auto c = build_mini_model(tiny_cfg(), 12);
  REQUIRE(a.param_count() == b.param_count());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    REQUIRE(a.params[i].name == b.params[i].name);
    REQUIRE(a.params[i].value.data == b.params[i].value.data);
    if (a.params[i].value.data != c.params[i].value.data) any_diff = true;
  }
  REQUIRE(any_diff);  // a different seed moves at least one tensor
}

TEST_CASE("residual blocks appear exactly at stride-1 same-width positions",
          "[model]") {
  auto m = build_mini_model(default_cfg(), 1);
  // Stage layout (24,1,2) (32,2,2) (64,2,2): the second block of stages two
  // and three are the only residual candidates.
  std::vector<bool> want = {false, false, true, false, true};
  REQUIRE(m.blocks.size() == want.size());
  for (std::size_t b = 0; b < want.size(); ++b)
    REQUIRE(m.blocks[b].residual == want[b]);
}

TEST_CASE("quantizer granularities follow tensor roles", "[model]") {
  auto m = build_mini_model(tiny_cfg(), 2);
  for (const auto* u : m.conv_units()) {
    const auto& wq = m.quants[std::size_t(u->wq)];
    REQUIRE(wq.granularity == Granularity::per_channel);
    REQUIRE(wq.slices == u->out_c);
    REQUIRE(wq.signedness == Signedness::signed_sym);
    if (u->aq >= 0) {
      const auto& aq = m.quants[std::size_t(u->aq)];
      REQUIRE(aq.granularity == Granularity::per_tensor);
      // Post-ReLU6 activations are one-sided.
      if (u->relu) REQUIRE(aq.signedness == Signedness::unsigned_sym);
    }
  }
  REQUIRE(m.quants[std::size_t(m.input_q)].signedness ==
          Signedness::signed_sym);
}

TEST_CASE("float path and disabled quantization agree", "[model]") {
  auto cfg = tiny_cfg();
  auto mq = build_mini_model(cfg, 21);
  auto mf = build_mini_model(cfg, 21);
  mf.quant_enabled = false;

  auto x = tiny_batch(2, cfg, 900);
  Tape<float> t1, t2;
  ForwardOpts off;
  off.quantize = false;  // quantizers present but bypassed
  auto g1 = forward(t1, mq, x, off);
  ForwardOpts on;
  auto g2 = forward(t2, mf, x, on);  // quantization structurally absent
  REQUIRE(g1.logits->value.shape == g2.logits->value.shape);
  for (std::size_t i = 0; i < g1.logits->value.size(); ++i)
    REQUIRE(g1.logits->value[i] == g2.logits->value[i]);
}

TEST_CASE("calibration initializes every quantizer and marks the model",
          "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 22);
  REQUIRE_FALSE(m.calibrated);
  calibrate_model(m, tiny_batch(8, cfg, 901), CalibMethod::parse("gaussian"),
                  CalibMethod::parse("p99.9"), 4);
  REQUIRE(m.calibrated);
  for (auto& q : m.quants)
    for (int s = 0; s < q.slices; ++s) {
      REQUIRE(q.step(s) > 0.0);
      REQUIRE(q.range(s) >= q.step(s));
      REQUIRE(q.effective_bits(s) == Catch::Approx(4.0).margin(1e-4));
    }
}

TEST_CASE("quantized forward records pre- and post-quant activations",
          "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 23);
  calibrate_model(m, tiny_batch(8, cfg, 902), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 4);

  auto x = tiny_batch(2, cfg, 903);
  std::vector<Tensor<float>> pre(m.quants.size()), post(m.quants.size());
  Tape<float> t;
  ForwardOpts opts;
  opts.record = &pre;
  opts.record_post = &post;
  auto g = forward(t, m, x, opts);
  REQUIRE(g.logits->value.shape == std::vector<int>{2, cfg.classes});

  for (std::size_t i = 0; i < m.quants.size(); ++i) {
    if (m.q_is_weight[i]) continue;
    INFO("quantizer " << m.quants[i].name);
    REQUIRE(pre[i].size() > 0);
    REQUIRE(post[i].size() > 0);
    REQUIRE(pre[i].shape == post[i].shape);
    // The post records sit on the quantizer's own grid.
    const auto& q = m.quants[i];
    for (std::size_t e = 0; e < post[i].size(); ++e) {
      const float requant = float(testutil::fq_oracle(
          double(post[i][e]), q.step(0), q.range(0),
          q.signedness == Signedness::signed_sym));
      REQUIRE(post[i][e] == Catch::Approx(requant).margin(1e-6));
    }
  }
}

TEST_CASE("total_loss is cross entropy alone without a budget", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 24);
  calibrate_model(m, tiny_batch(8, cfg, 904), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 4);
  auto x = tiny_batch(4, cfg, 905);
  const std::vector<int> y = {0, 1, 2, 3};

  Tape<float> t;
  auto g = forward(t, m, x, ForwardOpts{});
  KDConfig<float> kd;
  auto parts = total_loss(t, g, m, y, nullptr, 1, kd, nullptr, 0.1);
  REQUIRE(parts.total == parts.ce);
  REQUIRE(parts.kd == nullptr);
  REQUIRE(parts.penalty_w == nullptr);
  REQUIRE(parts.penalty_a == nullptr);
  REQUIRE(parts.beta == 0.0);
  REQUIRE(std::isfinite(parts.total->value[0]));
}

TEST_CASE("size penalty in the loss matches the closed form", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 25);
  calibrate_model(m, tiny_batch(8, cfg, 906), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 6);

  const auto st = size_terms(m);
  SizeBudget budget;
  budget.t_w_bits = st.weight_bits - 1000.0;  // force an overshoot
  budget.t_a_bits = st.act_bits + 1000.0;     // under budget on this side
  budget.beta_final = 1e-5;
  budget.ramp_steps = 10;

  auto x = tiny_batch(4, cfg, 907);
  Tape<float> t;
  auto g = forward(t, m, x, ForwardOpts{});
  KDConfig<float> kd;
  auto parts =
      total_loss(t, g, m, {0, 1, 2, 3}, &budget, 5, kd, nullptr, 0.1);

  REQUIRE(parts.beta == Catch::Approx(1e-5 * 0.5));
  REQUIRE(parts.penalty_w != nullptr);
  REQUIRE(parts.penalty_a != nullptr);
  const double want_w =
      rectified_quadratic_value(st.weight_bits, budget.t_w_bits, parts.beta);
  REQUIRE(double(parts.penalty_w->value[0]) ==
          Catch::Approx(want_w).epsilon(5e-3));
  REQUIRE(parts.penalty_a->value[0] == 0.0f);  // exactly rectified away

  // The penalty reaches the log-range leaves: backward must deposit
  // gradient on at least one live quantizer parameter.
  t.backward(parts.total);
  bool any = false;
  for (std::size_t i = 0; i < m.quants.size(); ++i)
    if (g.q_logq[i] && std::abs(g.q_logq[i]->grad[0]) > 0) any = true;
  REQUIRE(any);
}

TEST_CASE("beta = 0 steps skip the penalty nodes entirely", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 26);
  calibrate_model(m, tiny_batch(8, cfg, 908), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 4);
  SizeBudget budget;
  budget.t_w_bits = 1.0;
  budget.t_a_bits = 1.0;
  budget.beta_final = 0.0;  // disabled modulation
  budget.ramp_steps = 1;

  auto x = tiny_batch(2, cfg, 909);
  Tape<float> t;
  auto g = forward(t, m, x, ForwardOpts{});
  KDConfig<float> kd;
  auto parts = total_loss(t, g, m, {0, 1}, &budget, 100, kd, nullptr, 0.1);
  REQUIRE(parts.penalty_w == nullptr);
  REQUIRE(parts.penalty_a == nullptr);
  REQUIRE(parts.total == parts.ce);
}

TEST_CASE("soft-label distillation joins the loss when enabled", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 27);
  calibrate_model(m, tiny_batch(8, cfg, 910), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 4);
  auto x = tiny_batch(3, cfg, 911);
  auto teacher = testutil::random_tensor<float>({3, cfg.classes}, 912);

  Tape<float> t;
  auto g = forward(t, m, x, ForwardOpts{});
  KDConfig<float> kd;
  kd.mode = KDMode::soft_label;
  kd.temperature = 4.0;
  kd.kd_weight = 0.5;
  auto parts = total_loss(t, g, m, {0, 1, 2}, nullptr, 1, kd, &teacher, 0.1);
  REQUIRE(parts.kd != nullptr);
  REQUIRE(parts.total->value[0] ==
          Catch::Approx(parts.ce->value[0] + 0.5 * parts.kd->value[0])
              .epsilon(1e-5));
  // Missing teacher rows are an error, not a silent skip.
  Tape<float> t2;
  auto g2 = forward(t2, m, x, ForwardOpts{});
  REQUIRE_THROWS_AS(total_loss(t2, g2, m, {0, 1, 2}, nullptr, 1, kd, nullptr, 0.1),
                    error);
}

TEST_CASE("freeze_all freezes everything once and hashes stably", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 28);
  calibrate_model(m, tiny_batch(8, cfg, 913), CalibMethod::parse("max"),
                  CalibMethod::parse("max"), 4);
  REQUIRE_FALSE(m.all_frozen());
  m.freeze_all();
  REQUIRE(m.all_frozen());
  const auto h = m.quantizer_hash();
  REQUIRE(h == m.quantizer_hash());
  REQUIRE_THROWS_AS(m.freeze_all(), error);
}

TEST_CASE("bn running statistics move toward batch statistics", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 29);
  auto x = tiny_batch(8, cfg, 914);
  Tape<float> t;
  ForwardOpts opts;
  opts.training = true;
  opts.quantize = false;
  auto g = forward(t, m, x, opts);
  REQUIRE(g.bn_stats.size() == m.conv_units().size());

  const auto before = m.stem.bn_mean;
  apply_bn_update(m, g.bn_stats);
  const auto& after = m.stem.bn_mean;
  bool moved = false;
  for (std::size_t i = 0; i < after.size(); ++i)
    if (after[i] != before[i]) moved = true;
  REQUIRE(moved);
}

TEST_CASE("calibration grid produces one model per method pair", "[model]") {
  auto cfg = tiny_cfg();
  auto base = build_mini_model(cfg, 30);
  auto batch = tiny_batch(8, cfg, 915);
  const std::vector<CalibMethod> wm = {CalibMethod::parse("max"),
                                       CalibMethod::parse("gaussian")};
  const std::vector<CalibMethod> am = {CalibMethod::parse("max"),
                                       CalibMethod::parse("p99.9"),
                                       CalibMethod::parse("two_mean")};
  auto cells = run_calibration_grid(base, batch, wm, am, 4);
  REQUIRE(cells.size() == 6);
  for (const auto& c : cells) REQUIRE(c.model.calibrated);
  REQUIRE_FALSE(base.calibrated);  // the base stays untouched

  calibrate_model(base, batch, wm[0], am[0], 4);
  REQUIRE_THROWS_AS(run_calibration_grid(base, batch, wm, am, 4), error);
}

TEST_CASE("forward rejects wrong input geometry", "[model]") {
  auto cfg = tiny_cfg();
  auto m = build_mini_model(cfg, 31);
  Tape<float> t;
  Tensor<float> bad({2, cfg.input_channels, cfg.input_hw + 1, cfg.input_hw});
  REQUIRE_THROWS_AS(forward(t, m, bad, ForwardOpts{}), error);
}

TEST_CASE("config validation rejects malformed stages", "[model]") {
  MiniConfig c;
  c.stages = {};
  REQUIRE_THROWS_AS(c.validate(), error);
  c = MiniConfig{};
  c.stages[0].stride = 3;
  REQUIRE_THROWS_AS(c.validate(), error);
  c = MiniConfig{};
  c.classes = 1;
  REQUIRE_THROWS_AS(c.validate(), error);
}
