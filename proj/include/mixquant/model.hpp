#pragma once

// Trainable miniature inverted-bottleneck network with quantizers attached to
// every MVM weight tensor and every activation tensor that feeds an MVM (plus
// the pooled feature vector). Structure: quantize(input) -> stem conv/BN/ReLU6
// -> stages of {expand 1x1, depthwise 3x3, project 1x1} blocks with residual
// adds on stride-1 equal-shape blocks -> global average pool -> affine head.
// Block outputs come from the linear bottleneck (no ReLU6), so their
// quantizers are signed; ReLU6 outputs get unsigned quantizers.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "calibration.hpp"
#include "ops.hpp"
#include "penalty.hpp"
#include "quantizer.hpp"
#include "rng.hpp"

namespace mixquant {

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

struct MiniStage {
  int width = 0, depth = 0, stride = 1, expansion = 1;
};

struct MiniConfig {
  int input_channels = 3;
  int input_hw = 16;
  int classes = 10;
  int stem_width = 16;
  std::vector<MiniStage> stages{{24, 1, 2, 3}, {32, 2, 2, 3}, {64, 2, 2, 3}};

  void validate() const {
    require(input_channels >= 1 && input_hw >= 4 && classes >= 2 &&
                stem_width >= 1,
            "mini config: invalid base geometry");
    require(!stages.empty(), "mini config: needs at least one stage");
    for (const auto& s : stages)
      require(s.width >= 1 && s.depth >= 1 &&
                  (s.stride == 1 || s.stride == 2) && s.expansion >= 1,
              "mini config: invalid stage");
  }
};

struct Param {
  std::string name;
  Tensor<float> value;
  bool decay = false;
  bool trainable = true;
};

struct ConvUnit {
  std::string name;
  int in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0, groups = 1;
  int in_hw = 0, out_hw = 0;
  int w = -1;
  int gamma = -1, beta = -1;
  std::vector<float> bn_mean, bn_var;
  int wq = -1;
  int aq = -1;  // output quantizer; -1 when the block-output quantizer owns it
  bool relu = false;
};

struct MiniBlock {
  ConvUnit expand, dw, project;
  bool residual = false;
  int aq_out = -1;
};

struct Model {
  MiniConfig cfg;
  std::vector<Param> params;
  std::vector<QuantizerState> quants;
  std::vector<std::int64_t> q_elems;  // weights: tensor elems; acts: per-sample
  std::vector<bool> q_is_weight;
  int input_q = -1;
  ConvUnit stem;
  std::vector<MiniBlock> blocks;
  int gap_q = -1;
  int head_w = -1, head_b = -1, head_wq = -1;
  bool quant_enabled = true;  // false: float network (baseline / calibration)
  bool calibrated = false;

  std::vector<ConvUnit*> conv_units() {
    std::vector<ConvUnit*> u{&stem};
    for (auto& b : blocks) {
      u.push_back(&b.expand);
      u.push_back(&b.dw);
      u.push_back(&b.project);
    }
    return u;
  }
  std::vector<const ConvUnit*> conv_units() const {
    std::vector<const ConvUnit*> u{&stem};
    for (const auto& b : blocks) {
      u.push_back(&b.expand);
      u.push_back(&b.dw);
      u.push_back(&b.project);
    }
    return u;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  bool all_frozen() const {
    for (const auto& q : quants)
      if (!q.frozen) return false;
    return true;
  }

  void freeze_all() {
    for (auto& q : quants) q.freeze();
  }

  std::uint64_t quantizer_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& q : quants) h = hash_mix(h, q.state_hash());
    return h;
  }

  std::int64_t weight_elems_total() const {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < quants.size(); ++i)
      if (q_is_weight[i]) n += q_elems[i];
    return n;
  }
  std::int64_t act_elems_total() const {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < quants.size(); ++i)
      if (!q_is_weight[i]) n += q_elems[i];
    return n;
  }
};

namespace detail_model {

inline int conv_out_hw(int h, int k, int stride, int pad) {
  const int o = (h + 2 * pad - k) / stride + 1;
  require(o > 0, "mini model: non-positive spatial extent");
  return o;
}

struct Builder {
  Model m;
  std::uint64_t seed = 0;
  int pidx = 0;

  int add_param(const std::string& name, Tensor<float> v, bool decay,
                double init_std) {
    if (init_std > 0.0) {
      RngStream rs(rng_key(seed, RngPurpose::weight_init, std::uint64_t(pidx)));
      for (auto& x : v.data) x = float(rs.next_gaussian() * init_std);
    }
    ++pidx;
    m.params.push_back({name, std::move(v), decay, true});
    return int(m.params.size()) - 1;
  }

  int add_quant(const std::string& name, Granularity g, Signedness s,
                int slices, std::int64_t elems, bool is_weight) {
    m.quants.push_back(QuantizerState::make(name, g, s, slices));
    m.q_elems.push_back(elems);
    m.q_is_weight.push_back(is_weight);
    return int(m.quants.size()) - 1;
  }

  ConvUnit conv(const std::string& name, int in_c, int out_c, int k,
                int stride, int pad, int groups, int in_hw, bool relu,
                bool attach_aq) {
    ConvUnit u;
    u.name = name;
    u.in_c = in_c;
    u.out_c = out_c;
    u.k = k;
    u.stride = stride;
    u.pad = pad;
    u.groups = groups;
    u.in_hw = in_hw;
    u.out_hw = conv_out_hw(in_hw, k, stride, pad);
    u.relu = relu;
    const int fan_in = (in_c / groups) * k * k;
    u.w = add_param(name + ".w", Tensor<float>({out_c, in_c / groups, k, k}),
                    true, std::sqrt(2.0 / double(fan_in)));
    u.gamma = add_param(name + ".gamma", Tensor<float>({out_c}, 1.0f), false,
                        0.0);
    u.beta = add_param(name + ".beta", Tensor<float>({out_c}), false, 0.0);
    u.bn_mean.assign(std::size_t(out_c), 0.0f);
    u.bn_var.assign(std::size_t(out_c), 1.0f);
    const std::int64_t elems = std::int64_t(out_c) * (in_c / groups) * k * k;
    u.wq = add_quant(name + ".wq", Granularity::per_channel,
                     Signedness::signed_sym, out_c, elems, true);
    if (attach_aq) {
      const Signedness s =
          relu ? Signedness::unsigned_sym : Signedness::signed_sym;
      u.aq = add_quant(name + ".aq", Granularity::per_tensor, s, 1,
                       std::int64_t(out_c) * u.out_hw * u.out_hw, false);
    }
    return u;
  }
};

}  // namespace detail_model

inline Model build_mini_model(const MiniConfig& cfg, std::uint64_t seed = 1) {
  cfg.validate();
  detail_model::Builder b;
  b.m.cfg = cfg;
  b.seed = seed;

  b.m.input_q = b.add_quant(
      "input.aq", Granularity::per_tensor, Signedness::signed_sym, 1,
      std::int64_t(cfg.input_channels) * cfg.input_hw * cfg.input_hw, false);
  b.m.stem = b.conv("stem", cfg.input_channels, cfg.stem_width, 3, 1, 1, 1,
                    cfg.input_hw, true, true);

  int c = cfg.stem_width;
  int hw = b.m.stem.out_hw;
  int sid = 0;
  for (const auto& st : cfg.stages) {
    for (int i = 0; i < st.depth; ++i) {
      const std::string base =
          "s" + std::to_string(sid) + ".b" + std::to_string(i);
      const int stride = i == 0 ? st.stride : 1;
      const int mid = c * st.expansion;
      MiniBlock blk;
      blk.expand = b.conv(base + ".expand", c, mid, 1, 1, 0, 1, hw, true, true);
      blk.dw = b.conv(base + ".dw", mid, mid, 3, stride, 1, mid, hw, true,
                      true);
      const int out_hw = blk.dw.out_hw;
      blk.project =
          b.conv(base + ".project", mid, st.width, 1, 1, 0, 1, out_hw, false,
                 false);
      blk.residual = stride == 1 && c == st.width;
      blk.aq_out = b.add_quant(base + ".out.aq", Granularity::per_tensor,
                               Signedness::signed_sym, 1,
                               std::int64_t(st.width) * out_hw * out_hw, false);
      b.m.blocks.push_back(std::move(blk));
      c = st.width;
      hw = out_hw;
    }
    ++sid;
  }

  b.m.gap_q = b.add_quant("gap.aq", Granularity::per_tensor,
                          Signedness::signed_sym, 1, c, false);
  b.m.head_w =
      b.add_param("head.w", Tensor<float>({cfg.classes, c}), true,
                  std::sqrt(1.0 / double(c)));
  b.m.head_b = b.add_param("head.b", Tensor<float>({cfg.classes}), false, 0.0);
  b.m.head_wq = b.add_quant("head.wq", Granularity::per_channel,
                            Signedness::signed_sym, cfg.classes,
                            std::int64_t(cfg.classes) * c, true);
  return std::move(b.m);
}

struct ForwardOpts {
  bool training = false;
  bool quantize = true;
  GradScaleRule w_rule = make_rule(ScaleKind::STE);
  GradScaleRule a_rule = make_rule(ScaleKind::STE);
  std::uint64_t noise_key = 0;
  std::vector<Tensor<float>>* record = nullptr;  // pre-quant activation copies
  std::vector<Tensor<float>>* record_post = nullptr;  // post-quant copies
};

struct ForwardGraph {
  NodePtr<float> logits = nullptr;
  std::vector<NodePtr<float>> leaves;            // aligned with model params
  std::vector<NodePtr<float>> q_logd, q_logq;    // aligned with quantizers
  std::vector<BatchStats> bn_stats;              // aligned with conv_units()
};

inline ForwardGraph forward(Tape<float>& t, Model& m, const Tensor<float>& x,
                            const ForwardOpts& opts) {
  require(x.rank() == 4 && x.dim(1) == m.cfg.input_channels &&
              x.dim(2) == m.cfg.input_hw && x.dim(3) == m.cfg.input_hw,
          "mini model: input shape mismatch " + shape_str(x.shape));
  ForwardGraph g;
  g.leaves.resize(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    g.leaves[i] = t.leaf(m.params[i].value, m.params[i].trainable,
                         m.params[i].name);
  g.q_logd.assign(m.quants.size(), nullptr);
  g.q_logq.assign(m.quants.size(), nullptr);
  std::vector<NodePtr<float>> qd(m.quants.size(), nullptr);
  std::vector<NodePtr<float>> qq(m.quants.size(), nullptr);

  const bool live_quant = opts.quantize && m.quant_enabled;

  auto apply_quant = [&](NodePtr<float> v, int qi, const GradScaleRule& rule,
                         bool record) -> NodePtr<float> {
    if (record && opts.record) (*opts.record)[std::size_t(qi)] = v->value;
    NodePtr<float> r = v;
    if (live_quant) {
      QuantizerState& qs = m.quants[std::size_t(qi)];
      const std::uint64_t site_key =
          hash_mix(opts.noise_key, std::uint64_t(qi) + 1);
      if (qs.frozen) {
        r = fake_quantize_frozen(t, v, qs, rule, site_key);
      } else {
        if (!qd[std::size_t(qi)]) {
          Tensor<float> ld({qs.slices}), lq({qs.slices});
          for (int s = 0; s < qs.slices; ++s) {
            ld[std::size_t(s)] = qs.log_d[std::size_t(s)];
            lq[std::size_t(s)] = qs.log_q[std::size_t(s)];
          }
          g.q_logd[std::size_t(qi)] =
              t.leaf(std::move(ld), qs.trainable, qs.name + ".log_d");
          g.q_logq[std::size_t(qi)] =
              t.leaf(std::move(lq), qs.trainable, qs.name + ".log_q");
          qd[std::size_t(qi)] = exp_op(t, g.q_logd[std::size_t(qi)]);
          qq[std::size_t(qi)] = exp_op(t, g.q_logq[std::size_t(qi)]);
        }
        r = fake_quantize(t, v, qd[std::size_t(qi)], qq[std::size_t(qi)], qs,
                          rule, site_key);
      }
    }
    if (record && opts.record_post)
      (*opts.record_post)[std::size_t(qi)] = r->value;
    return r;
  };

  const auto units = m.conv_units();
  g.bn_stats.resize(units.size());
  int unit_idx = 0;
  auto run_unit = [&](NodePtr<float> in, const ConvUnit& u) -> NodePtr<float> {
    NodePtr<float> w = g.leaves[std::size_t(u.w)];
    if (live_quant) w = apply_quant(w, u.wq, opts.w_rule, false);
    auto y = conv2d(t, in, w, u.stride, u.pad, u.groups);
    y = opts.training
            ? batchnorm_train(t, y, g.leaves[std::size_t(u.gamma)],
                              g.leaves[std::size_t(u.beta)], kBnEps,
                              &g.bn_stats[std::size_t(unit_idx)])
            : batchnorm_eval(t, y, g.leaves[std::size_t(u.gamma)],
                             g.leaves[std::size_t(u.beta)], u.bn_mean,
                             u.bn_var, kBnEps);
    ++unit_idx;
    if (u.relu) y = relu6(t, y);
    if (u.aq >= 0) y = apply_quant(y, u.aq, opts.a_rule, true);
    return y;
  };

  auto cur = t.constant(x, "input");
  cur = apply_quant(cur, m.input_q, opts.a_rule, true);
  cur = run_unit(cur, m.stem);
  for (auto& blk : m.blocks) {
    auto in = cur;
    auto y = run_unit(in, blk.expand);
    y = run_unit(y, blk.dw);
    y = run_unit(y, blk.project);
    if (blk.residual) y = add(t, in, y);
    cur = apply_quant(y, blk.aq_out, opts.a_rule, true);
  }
  auto pooled = global_avgpool(t, cur);
  pooled = apply_quant(pooled, m.gap_q, opts.a_rule, true);
  NodePtr<float> hw = g.leaves[std::size_t(m.head_w)];
  if (live_quant) hw = apply_quant(hw, m.head_wq, opts.w_rule, false);
  g.logits = affine(t, pooled, hw, g.leaves[std::size_t(m.head_b)]);
  return g;
}

// Fold this step's batch statistics into the running estimates.
inline void apply_bn_update(Model& m, const std::vector<BatchStats>& stats) {
  auto units = m.conv_units();
  require(stats.size() == units.size(), "bn update: unit count mismatch");
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (stats[u].mean.empty()) continue;
    auto& unit = *units[u];
    for (std::size_t c = 0; c < unit.bn_mean.size(); ++c) {
      unit.bn_mean[c] = (1.0f - kBnMomentum) * unit.bn_mean[c] +
                        kBnMomentum * float(stats[u].mean[c]);
      unit.bn_var[c] = (1.0f - kBnMomentum) * unit.bn_var[c] +
                       kBnMomentum * float(stats[u].var[c]);
    }
  }
}

// Write back tape-leaf values into the model (after an optimizer step edits
// leaf values in place the caller copies them here), or simply copy grads out.
// The driver owns that loop; nothing to do in the model itself.

// ---- Size terms (value level) -------------------------------------------

struct SizeTerms {
  double weight_bits = 0.0;
  double act_bits = 0.0;
};

inline SizeTerms size_terms(const Model& m) {
  SizeTerms st;
  for (std::size_t i = 0; i < m.quants.size(); ++i) {
    const auto& q = m.quants[i];
    const std::int64_t elems = m.q_elems[i];
    double bits = 0.0;
    const std::int64_t per = elems / q.slices;
    for (int s = 0; s < q.slices; ++s)
      bits += q.effective_bits(s) * double(per);
    if (m.q_is_weight[i])
      st.weight_bits += bits;
    else
      st.act_bits += bits;
  }
  return st;
}

// Homogeneous footprint in bits at a fixed bit-width (budget baselines).
inline SizeTerms homogeneous_bits(const Model& m, int bits) {
  return {double(bits) * double(m.weight_elems_total()),
          double(bits) * double(m.act_elems_total())};
}

// ---- Total loss -----------------------------------------------------------

struct LossParts {
  NodePtr<float> total = nullptr;
  NodePtr<float> ce = nullptr;
  NodePtr<float> kd = nullptr;  // null when off
  NodePtr<float> penalty_w = nullptr;  // null when beta = 0
  NodePtr<float> penalty_a = nullptr;
  double beta = 0.0;
  SizeTerms sizes;
};

// CE(+KD) plus the two rectified quadratic size terms when beta(step) > 0.
// The bit totals enter the tape linearly through the log-space quantizer
// leaves, so the penalty gradient reaches every live (d, q_max).
inline LossParts total_loss(Tape<float>& t, const ForwardGraph& g, Model& m,
                            const std::vector<int>& targets,
                            const SizeBudget* budget, long long step,
                            const KDConfig<float>& kd,
                            const Tensor<float>* teacher_logits,
                            double label_smoothing) {
  LossParts out;
  out.ce = cross_entropy(t, g.logits, targets, float(label_smoothing));
  out.total = out.ce;
  if (kd.mode == KDMode::soft_label) {
    kd.validate();
    require(teacher_logits != nullptr,
            "kd: soft_label mode needs teacher logits");
    out.kd = soft_label_kd(t, g.logits, *teacher_logits,
                           float(kd.temperature));
    out.total = add(t, out.total,
                    mul_scalar(t, out.kd, float(kd.kd_weight)));
  } else if (kd.mode == KDMode::penalty_hook) {
    kd.validate();
    out.kd = kd.hook(t, g.logits);
    out.total = add(t, out.total,
                    mul_scalar(t, out.kd, float(kd.kd_weight)));
  }
  out.sizes = size_terms(m);
  if (budget) {
    budget->validate();
    out.beta = budget->beta_at(step);
    if (out.beta > 0.0) {
      NodePtr<float> wsum = nullptr, asum = nullptr;
      double w_frozen = 0.0, a_frozen = 0.0;
      for (std::size_t i = 0; i < m.quants.size(); ++i) {
        const auto& q = m.quants[i];
        const double per = double(m.q_elems[i] / q.slices);
        if (q.frozen || !g.q_logd[i]) {
          double bits = 0.0;
          for (int s = 0; s < q.slices; ++s)
            bits += q.effective_bits(s) * per;
          (m.q_is_weight[i] ? w_frozen : a_frozen) += bits;
          continue;
        }
        auto diff = sub(t, g.q_logq[i], g.q_logd[i]);
        std::vector<float> wts(std::size_t(q.slices), float(per / kLn2));
        auto bits_node = weighted_sum(t, diff, std::move(wts));
        auto& acc = m.q_is_weight[i] ? wsum : asum;
        acc = acc ? add(t, acc, bits_node) : bits_node;
      }
      auto finalize = [&](NodePtr<float> sum_node, double frozen_extra,
                          double target) -> NodePtr<float> {
        if (!sum_node) {
          const double v =
              rectified_quadratic_value(frozen_extra, target, out.beta);
          return t.constant(Tensor<float>::from({1}, {float(v)}), "penalty");
        }
        if (frozen_extra != 0.0)
          sum_node = add_scalar(t, sum_node, float(frozen_extra));
        return rectified_quadratic(t, sum_node, target, out.beta);
      };
      out.penalty_w = finalize(wsum, w_frozen, budget->t_w_bits);
      out.penalty_a = finalize(asum, a_frozen, budget->t_a_bits);
      out.total = add(t, out.total, add(t, out.penalty_w, out.penalty_a));
    }
  }
  return out;
}

// ---- Calibration ----------------------------------------------------------

// One float forward over the batch records every activation quantizer's
// input; weights calibrate directly on their tensors, per slice.
inline void calibrate_model(Model& m, const Tensor<float>& batch,
                            CalibMethod weight_method, CalibMethod act_method,
                            int target_bits) {
  std::vector<Tensor<float>> rec(m.quants.size());
  Tape<float> t;
  ForwardOpts opts;
  opts.training = true;  // batch statistics; running averages stay untouched
  opts.quantize = false;
  opts.record = &rec;
  forward(t, m, batch, opts);
  for (std::size_t i = 0; i < m.quants.size(); ++i) {
    auto& q = m.quants[i];
    if (m.q_is_weight[i]) continue;
    require(rec[i].size() > 0,
            "calibration: no recorded samples for " + q.name);
    calibrate_quantizer(q, rec[i], act_method, target_bits);
  }
  auto units = m.conv_units();
  for (auto* u : units)
    calibrate_quantizer(m.quants[std::size_t(u->wq)],
                        m.params[std::size_t(u->w)].value, weight_method,
                        target_bits);
  calibrate_quantizer(m.quants[std::size_t(m.head_wq)],
                      m.params[std::size_t(m.head_w)].value, weight_method,
                      target_bits);
  m.calibrated = true;
}

struct CalibratedCell {
  CalibMethod weight_method, act_method;
  Model model;
};

// Cross product of weight and activation methods, one initialized model per
// cell, all from the same uncalibrated base and the same batch.
inline std::vector<CalibratedCell> run_calibration_grid(
    const Model& base, const Tensor<float>& batch,
    const std::vector<CalibMethod>& weight_methods,
    const std::vector<CalibMethod>& act_methods, int bits) {
  require(!base.calibrated, "calibration grid: model must be uncalibrated");
  std::vector<CalibratedCell> cells;
  cells.reserve(weight_methods.size() * act_methods.size());
  for (const auto& wm : weight_methods)
    for (const auto& am : act_methods) {
      CalibratedCell cell{wm, am, base};
      calibrate_model(cell.model, batch, wm, am, bits);
      cells.push_back(std::move(cell));
    }
  return cells;
}

}  // namespace mixquant
