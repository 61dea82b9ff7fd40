#pragma once

// Three-phase training driver.
//   Phase 1: quantized pretraining at the calibrated (homogeneous) widths;
//            weights and quantizer parameters update every step, no penalty.
//   Phase 2: precision search; the size penalty ramps in and quantizer
//            parameters update only on every Phi-th step. Ends by freezing.
//   Phase 3: weight-only finetuning; the frozen grids must not change.
//
// The same loop also runs the float baseline (quantization disabled), so
// baseline and quantized runs see identical data order and augmentation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "dataset.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optimizer.hpp"

namespace mixquant {

// ---- Plan and learning-rate schedule ---------------------------------------

struct PhasePlan {
  int epochs_per_phase = 50;
  int phi = 20;              // quantizer update period in phase 2 (steps)
  int warmup_epochs = 2;     // linear LR warmup, then cosine decay to zero
  double lr_peak = 1e-4;
  double quant_lr_peak = 0.05;  // separate peak for (log d, log q_max)
  double weight_decay = 1e-5;
  double label_smoothing = 0.1;
  double momentum = 0.9;
  int batch_size = 32;
  double ramp_fraction = 0.5;  // share of phase-2 steps spent ramping beta
  int steps_per_epoch = 0;     // stamped from the dataset before running

  long long total_steps() const {
    return (long long)(epochs_per_phase) * steps_per_epoch;
  }
  long long warmup_steps() const {
    return (long long)(warmup_epochs) * steps_per_epoch;
  }

  void validate() const {
    require(epochs_per_phase >= 1, "plan: epochs_per_phase must be >= 1");
    require(phi >= 1, "plan: phi must be >= 1");
    require(warmup_epochs >= 0 && warmup_epochs < epochs_per_phase,
            "plan: warmup must be shorter than the phase");
    require(lr_peak > 0 && quant_lr_peak > 0, "plan: peaks must be positive");
    require(weight_decay >= 0, "plan: weight_decay must be >= 0");
    require(label_smoothing >= 0 && label_smoothing < 1,
            "plan: label_smoothing must lie in [0, 1)");
    require(momentum >= 0 && momentum < 1,
            "plan: momentum must lie in [0, 1)");
    require(batch_size >= 1, "plan: batch_size must be >= 1");
    require(ramp_fraction > 0 && ramp_fraction <= 1,
            "plan: ramp_fraction must lie in (0, 1]");
    require(steps_per_epoch >= 1, "plan: steps_per_epoch not stamped");
    require(total_steps() - 1 > warmup_steps(),
            "plan: warmup must end before the final step");
  }
};

namespace detail_sched {

inline double lr_at_peak(long long step, const PhasePlan& p, double peak) {
  const long long total = p.total_steps();
  const long long w = p.warmup_steps();
  require(step >= 0 && step < total, "lr: step outside the phase");
  if (step < w) return peak * double(step) / double(w);
  const double progress = double(step - w) / double(total - 1 - w);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace detail_sched

// 0-based step within the phase; 0 at the first step (when warmup exists),
// peak at the end of warmup, exactly 0 at the final step.
inline double lr_at(long long step, const PhasePlan& p) {
  return detail_sched::lr_at_peak(step, p, p.lr_peak);
}

inline double quant_lr_at(long long step, const PhasePlan& p) {
  return detail_sched::lr_at_peak(step, p, p.quant_lr_peak);
}

// ---- Evaluation -------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  long long correct = 0;
  long long total = 0;
  std::vector<int> predictions;
};

// Top-1 over the whole set, unaugmented, batch-norm in running-stat mode.
// Batches are independent, so splitting them across threads cannot change
// the result; thread count only affects wall clock.
inline EvalResult evaluate(Model& m, const Dataset& ds, int batch_size = 64,
                           int threads = 1) {
  require(ds.count() > 0, "eval: empty dataset");
  require(batch_size >= 1, "eval: batch_size must be >= 1");
  const std::size_t n = ds.count();
  const std::size_t nb = (n + std::size_t(batch_size) - 1) / batch_size;
  EvalResult out;
  out.predictions.assign(n, -1);

  auto run_range = [&](std::size_t tid, std::size_t stride) {
    for (std::size_t b = tid; b < nb; b += stride) {
      const std::size_t lo = b * std::size_t(batch_size);
      const std::size_t hi = std::min(n, lo + std::size_t(batch_size));
      std::vector<std::size_t> idx;
      idx.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
      Batch batch = make_batch(ds, idx, /*augment=*/false, 0);
      Tape<float> tape;
      ForwardOpts fo;
      fo.training = false;
      fo.quantize = true;
      ForwardGraph g = forward(tape, m, batch.x, fo);
      const int classes = g.logits->value.dim(1);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const float* row = g.logits->value.data.data() + r * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        out.predictions[idx[r]] = best;
      }
    }
  };

  if (threads <= 1) {
    run_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(threads));
    for (int tid = 0; tid < threads; ++tid)
      pool.emplace_back(run_range, std::size_t(tid), std::size_t(threads));
    for (auto& th : pool) th.join();
  }

  out.total = (long long)(n);
  for (std::size_t i = 0; i < n; ++i)
    if (out.predictions[i] == int(ds.labels[i])) ++out.correct;
  out.accuracy = double(out.correct) / double(out.total);
  return out;
}

// ---- Session and phase outcomes ---------------------------------------------

struct RuleConfig {
  GradScaleRule weights = make_rule(ScaleKind::STE);
  GradScaleRule acts = make_rule(ScaleKind::STE);
};

struct TrainSession {
  Model* model = nullptr;
  const Dataset* train = nullptr;
  const Dataset* eval = nullptr;
  PhasePlan plan;  // steps_per_epoch is stamped from `train` when unset
  RuleConfig rules;
  KDConfig<float> kd;
  const TeacherLogits* teacher = nullptr;
  std::uint64_t seed = 1;
  MetricsWriter* metrics = nullptr;  // optional
  int threads = 1;                   // evaluation only
  int eval_batch = 64;
};

struct PhaseOutcome {
  int exit_code = 0;  // 0 ok, 3 aborted (divergence or collapse)
  std::string abort_reason;
  double final_eval_acc = -1.0;
  long long steps_run = 0;
  long long quant_update_steps = 0;  // steps on which (d, q_max) moved
};

namespace detail_sched {

// One full phase of the shared loop. `budget` is non-null only in phase 2.
inline PhaseOutcome run_phase(TrainSession& s, int phase,
                              const SizeBudget* budget) {
  require(s.model && s.train && s.eval, "train: session is incomplete");
  Model& m = *s.model;
  PhasePlan plan = s.plan;
  if (plan.steps_per_epoch == 0)
    plan.steps_per_epoch = int(s.train->count() / std::size_t(plan.batch_size));
  plan.validate();
  require(s.train->classes == m.cfg.classes && s.eval->classes == m.cfg.classes,
          "train: dataset class count does not match the model");
  if (s.kd.mode == KDMode::soft_label) {
    s.kd.validate();
    require(s.teacher != nullptr && s.teacher->count() == s.train->count(),
            "train: soft-label distillation needs one teacher row per "
            "training sample");
  }

  // Fresh optimizer state each phase: phase boundaries restart the schedule,
  // and carrying second-moment estimates across them would couple phases
  // that are defined as independent runs (checkpoint resume relies on this).
  RmsOptimizer opt({0.9, 1e-8, plan.momentum});
  std::vector<int> pgroup(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    pgroup[i] = opt.add_group(m.params[i].value.size());
  std::vector<int> qd_group(m.quants.size(), -1);
  std::vector<int> qq_group(m.quants.size(), -1);
  const bool quants_live = m.quant_enabled && phase != 3;
  if (quants_live) {
    for (std::size_t qi = 0; qi < m.quants.size(); ++qi) {
      const auto& q = m.quants[qi];
      if (q.frozen || !q.trainable) continue;
      qd_group[qi] = opt.add_group(std::size_t(q.slices));
      qq_group[qi] = opt.add_group(std::size_t(q.slices));
    }
  }

  PhaseOutcome out;
  const double chance = 1.0 / double(m.cfg.classes);
  int collapse_streak = 0;
  long long in_phase_step = 0;  // 1-based once inside the loop

  std::vector<std::size_t> order(s.train->count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < plan.epochs_per_phase; ++epoch) {
    RngStream shuffle_rng(rng_key(s.seed, RngPurpose::data_shuffle,
                                  std::uint64_t(phase),
                                  std::uint64_t(epoch)));
    fisher_yates(order, shuffle_rng);

    for (int bstep = 0; bstep < plan.steps_per_epoch; ++bstep) {
      ++in_phase_step;
      const auto t0 = std::chrono::steady_clock::now();

      std::vector<std::size_t> idx(
          order.begin() + std::size_t(bstep) * plan.batch_size,
          order.begin() + std::size_t(bstep + 1) * plan.batch_size);
      Batch batch = make_batch(
          *s.train, idx, /*augment=*/true,
          rng_key(s.seed, RngPurpose::augmentation, std::uint64_t(phase),
                  std::uint64_t(epoch), std::uint64_t(bstep)));

      Tape<float> tape;
      ForwardOpts fo;
      fo.training = true;
      fo.quantize = true;
      fo.w_rule = s.rules.weights;
      fo.a_rule = s.rules.acts;
      fo.noise_key = rng_key(s.seed, RngPurpose::grad_noise,
                             std::uint64_t(phase), std::uint64_t(epoch),
                             std::uint64_t(bstep));
      ForwardGraph g = forward(tape, m, batch.x, fo);

      Tensor<float> teacher_batch;
      const Tensor<float>* tb = nullptr;
      if (s.kd.mode == KDMode::soft_label) {
        teacher_batch = s.teacher->gather(batch.indices);
        tb = &teacher_batch;
      }
      LossParts parts =
          total_loss(tape, g, m, batch.labels, budget, in_phase_step, s.kd,
                     tb, plan.label_smoothing);
      const double loss = parts.total->value.data[0];
      if (!std::isfinite(loss)) {
        out.exit_code = 3;
        out.abort_reason = "divergence: non-finite loss at phase " +
                           std::to_string(phase) + " step " +
                           std::to_string(in_phase_step);
        out.steps_run = in_phase_step - 1;
        return out;
      }
      tape.backward(parts.total);

      const long long sched_step = in_phase_step - 1;  // 0-based for the LR
      const double lr = lr_at(sched_step, plan);
      const double qlr = quant_lr_at(sched_step, plan);

      for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& p = m.params[i];
        if (!p.trainable) continue;
        opt.step(pgroup[i], p.value.data.data(), g.leaves[i]->grad.data.data(),
                 p.value.size(), lr, p.decay ? plan.weight_decay : 0.0);
      }

      const bool quant_step =
          quants_live &&
          (phase == 1 || (phase == 2 && in_phase_step % plan.phi == 0));
      if (quant_step) {
        bool moved = false;
        for (std::size_t qi = 0; qi < m.quants.size(); ++qi) {
          if (qd_group[qi] < 0 || !g.q_logd[qi]) continue;
          auto& q = m.quants[qi];
          opt.step(qd_group[qi], q.log_d.data(),
                   g.q_logd[qi]->grad.data.data(), std::size_t(q.slices), qlr,
                   0.0);
          opt.step(qq_group[qi], q.log_q.data(),
                   g.q_logq[qi]->grad.data.data(), std::size_t(q.slices), qlr,
                   0.0);
          q.clamp_floors();
          moved = true;
        }
        if (moved) ++out.quant_update_steps;
      }

      apply_bn_update(m, g.bn_stats);

      if (s.metrics) {
        MetricsRow r;
        r.kind = "step";
        r.phase = phase;
        r.epoch = epoch;
        r.step = in_phase_step;
        r.loss = loss;
        r.ce = parts.ce->value.data[0];
        r.kd = parts.kd ? parts.kd->value.data[0] : 0.0;
        r.penalty_w = parts.penalty_w ? parts.penalty_w->value.data[0] : 0.0;
        r.penalty_a = parts.penalty_a ? parts.penalty_a->value.data[0] : 0.0;
        r.beta = parts.beta;
        r.lr = lr;
        r.quant_lr = qlr;
        r.weight_bits = parts.sizes.weight_bits;
        r.act_bits = parts.sizes.act_bits;
        r.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
        s.metrics->row(r);
      }
    }

    const auto e0 = std::chrono::steady_clock::now();
    EvalResult ev = evaluate(m, *s.eval, s.eval_batch, s.threads);
    out.final_eval_acc = ev.accuracy;
    if (s.metrics) {
      MetricsRow r;
      r.kind = "eval";
      r.phase = phase;
      r.epoch = epoch;
      r.step = in_phase_step;
      r.eval_acc = ev.accuracy;
      r.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - e0)
                      .count();
      s.metrics->row(r);
    }
    if (ev.accuracy < 2.0 * chance) {
      if (++collapse_streak >= 3) {
        out.exit_code = 3;
        out.abort_reason =
            "collapse: eval accuracy below twice chance for 3 consecutive "
            "epochs (phase " +
            std::to_string(phase) + ", epoch " + std::to_string(epoch) + ")";
        out.steps_run = in_phase_step;
        return out;
      }
    } else {
      collapse_streak = 0;
    }
  }

  out.steps_run = in_phase_step;
  if (s.metrics) s.metrics->flush();
  return out;
}

}  // namespace detail_sched

// ---- Public phase entry points ----------------------------------------------

// Phase 1: homogeneous quantized pretraining. The model must be calibrated.
inline PhaseOutcome run_phase1_pretrain(TrainSession& s) {
  require(s.model != nullptr, "train: session has no model");
  if (s.model->quant_enabled)
    require(s.model->calibrated, "phase 1 requires a calibrated model");
  return detail_sched::run_phase(s, 1, nullptr);
}

// Phase 2: precision search under the size budget; freezes all quantizers
// on success.
inline PhaseOutcome run_phase2_precision(TrainSession& s,
                                         const SizeBudget& budget) {
  require(s.model != nullptr, "train: session has no model");
  budget.validate();
  PhaseOutcome out = detail_sched::run_phase(
      s, 2, s.model->quant_enabled ? &budget : nullptr);
  if (out.exit_code == 0 && s.model->quant_enabled) s.model->freeze_all();
  return out;
}

// Phase 3: weight-only finetuning on the frozen grids. The quantizer state
// hash must be identical before and after.
inline PhaseOutcome run_phase3_finetune(TrainSession& s) {
  require(s.model != nullptr, "train: session has no model");
  std::uint64_t before = 0;
  if (s.model->quant_enabled) {
    require(s.model->all_frozen(), "phase 3 requires frozen quantizers");
    before = s.model->quantizer_hash();
  }
  PhaseOutcome out = detail_sched::run_phase(s, 3, nullptr);
  if (s.model->quant_enabled)
    require(s.model->quantizer_hash() == before,
            "phase 3 must not modify frozen quantizers");
  return out;
}

}  // namespace mixquant
