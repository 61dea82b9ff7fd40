// mixquant command-line tool: calibrate / train / report / bench-gradscale.
// Every command is deterministic under a fixed seed; wall-clock outputs are
// confined to columns suffixed _nondet. Exit codes: 0 success, 1 usage,
// 2 data or configuration error, 3 training abort.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixquant/checkpoint.hpp"
#include "mixquant/config.hpp"
#include "mixquant/int_infer.hpp"
#include "mixquant/metrics.hpp"
#include "mixquant/reference_models.hpp"
#include "mixquant/scheduler.hpp"
#include "mixquant/size_accountant.hpp"

namespace {

using namespace mixquant;

int env_threads() {
  const char* v = std::getenv("MIXQUANT_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return std::min(std::max(n, 1), 64);
}

std::string ckpt_path(const std::string& out, int phase) {
  return out + "/checkpoint_phase" + std::to_string(phase) + ".mqck";
}

std::string metrics_path(const std::string& out, int phase) {
  return out + "/metrics_phase" + std::to_string(phase) + ".csv";
}

// Per-quantizer (d, q_max, b); per-channel quantizers print slice extremes.
void print_quantizer_table(const Model& m) {
  std::printf("%-24s %-7s %12s %12s %8s\n", "quantizer", "slices", "d",
              "q_max", "bits");
  for (const auto& q : m.quants) {
    double d_lo = 1e300, d_hi = 0, q_lo = 1e300, q_hi = 0, b_lo = 1e300,
           b_hi = 0;
    for (int s = 0; s < q.slices; ++s) {
      d_lo = std::min(d_lo, q.step(s));
      d_hi = std::max(d_hi, q.step(s));
      q_lo = std::min(q_lo, q.range(s));
      q_hi = std::max(q_hi, q.range(s));
      b_lo = std::min(b_lo, q.effective_bits(s));
      b_hi = std::max(b_hi, q.effective_bits(s));
    }
    if (q.slices == 1) {
      std::printf("%-24s %-7d %12.6g %12.6g %8.3f\n", q.name.c_str(), 1, d_lo,
                  q_lo, b_lo);
    } else {
      std::printf("%-24s %-7d %5.4g..%-5.4g %5.4g..%-5.4g %3.2f..%-3.2f\n",
                  q.name.c_str(), q.slices, d_lo, d_hi, q_lo, q_hi, b_lo,
                  b_hi);
    }
  }
}

Batch calibration_batch(const RunConfig& cfg, const Dataset& train) {
  const std::size_t n =
      std::min(train.count(), std::size_t(cfg.calibration.batch_size));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_batch(train, idx, /*augment=*/false, 0);
}

Model calibrated_model(const RunConfig& cfg, const Dataset& train) {
  Model m = build_mini_model(cfg.model, cfg.seed);
  Batch cb = calibration_batch(cfg, train);
  calibrate_model(m, cb.x, CalibMethod::parse(cfg.calibration.weights),
                  CalibMethod::parse(cfg.calibration.acts),
                  cfg.calibration.bits);
  return m;
}

Dataset dataset_prefix(const Dataset& ds, std::size_t n) {
  Dataset out;
  out.channels = ds.channels;
  out.h = ds.h;
  out.w = ds.w;
  out.classes = ds.classes;
  n = std::min(n, ds.count());
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + std::ptrdiff_t(n));
  out.pixels.assign(ds.pixels.begin(),
                    ds.pixels.begin() + std::ptrdiff_t(n * ds.sample_elems()));
  return out;
}

// ---- calibrate ---------------------------------------------------------------

int cmd_calibrate(const RunConfig& cfg, const std::string& out, bool grid) {
  Dataset train, eval;
  load_datasets(cfg, train, eval);
  Model m = calibrated_model(cfg, train);
  print_quantizer_table(m);
  std::filesystem::create_directories(out);
  save_checkpoint(ckpt_path(out, 0), m, cfg.seed, 0);
  std::printf("wrote %s\n", ckpt_path(out, 0).c_str());

  if (grid) {
    const auto methods = calibration_method_grid();
    Model base = build_mini_model(cfg.model, cfg.seed);
    Batch cb = calibration_batch(cfg, train);
    auto cells =
        run_calibration_grid(base, cb.x, methods, methods,
                             cfg.calibration.bits);
    Dataset probe = dataset_prefix(eval, 64);
    const int threads = env_threads();
    const std::string path = out + "/calibration_grid.csv";
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), "cannot open '" + path + "'");
    f << "# schema=mixquant-calibgrid-v1\n";
    f << "weight_method";
    for (const auto& am : methods) f << "," << am.name();
    f << "\n";
    std::size_t cell = 0;
    for (const auto& wm : methods) {
      f << wm.name();
      for (std::size_t a = 0; a < methods.size(); ++a) {
        EvalResult ev = evaluate(cells[cell].model, probe, 64, threads);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6g", ev.accuracy);
        f << "," << buf;
        ++cell;
      }
      f << "\n";
    }
    std::printf("wrote %s (%zu cells)\n", path.c_str(), cells.size());
  }
  return 0;
}

// ---- train -------------------------------------------------------------------

struct PhaseArtifacts {
  PhaseOutcome outcome;
};

int run_one_phase(const RunConfig& cfg, Model& m, const Dataset& train,
                  const Dataset& eval, const TeacherLogits* teacher,
                  const std::string& out, int phase) {
  PhasePlan plan = plan_for_phase(cfg, phase);
  const int spe = int(train.count() / std::size_t(plan.batch_size));
  require(spe >= 1, "train: dataset smaller than one batch");
  plan.steps_per_epoch = spe;

  MetricsWriter mw;
  mw.open(metrics_path(out, phase));

  TrainSession s;
  s.model = &m;
  s.train = &train;
  s.eval = &eval;
  s.plan = plan;
  s.rules = rules_from_config(cfg);
  s.kd = kd_from_config(cfg);
  s.teacher = teacher;
  s.seed = cfg.seed;
  s.metrics = &mw;
  s.threads = env_threads();

  PhaseOutcome oc;
  if (phase == 1) {
    oc = run_phase1_pretrain(s);
  } else if (phase == 2) {
    const long long p2_steps = (long long)(plan.epochs_per_phase) * spe;
    SizeBudget budget = budget_from_config(cfg, m, p2_steps);
    oc = run_phase2_precision(s, budget);
  } else {
    oc = run_phase3_finetune(s);
  }
  if (oc.exit_code != 0) {
    std::fprintf(stderr, "training aborted: %s\n", oc.abort_reason.c_str());
    return 3;
  }
  if (phase == 2 && m.quant_enabled) check_accumulator_widths(m);
  save_checkpoint(ckpt_path(out, phase), m, cfg.seed, phase);
  std::printf(
      "phase %d done: steps=%lld quant_update_steps=%lld eval_acc=%.4f "
      "wrote %s\n",
      phase, oc.steps_run, oc.quant_update_steps, oc.final_eval_acc,
      ckpt_path(out, phase).c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& out,
              const std::string& phase) {
  Dataset train, eval;
  load_datasets(cfg, train, eval);
  TeacherLogits teacher;
  const TeacherLogits* teacher_ptr = nullptr;
  if (parse_kd_mode(cfg.kd.mode) == KDMode::soft_label) {
    require(!cfg.data.teacher_path.empty(),
            "config: soft_label distillation needs data.teacher_path");
    teacher = load_teacher_logits(cfg.data.teacher_path);
    teacher_ptr = &teacher;
  }
  std::filesystem::create_directories(out);

  if (phase == "all") {
    Model m = calibrated_model(cfg, train);
    save_checkpoint(ckpt_path(out, 0), m, cfg.seed, 0);
    for (int ph = 1; ph <= 3; ++ph) {
      const int rc = run_one_phase(cfg, m, train, eval, teacher_ptr, out, ph);
      if (rc != 0) return rc;
    }
    return 0;
  }

  const int ph = std::stoi(phase);
  require(ph >= 1 && ph <= 3, "train: phase must be 1, 2, 3 or all");
  Checkpoint ck = load_checkpoint(ckpt_path(out, ph - 1));
  require(ck.phase == ph - 1,
          "train: checkpoint " + ckpt_path(out, ph - 1) +
              " is not a phase-" + std::to_string(ph - 1) + " checkpoint");
  require(ck.seed == cfg.seed,
          "train: checkpoint seed does not match the config seed");
  if (ph == 1 && ck.model.quant_enabled)
    require(ck.model.calibrated, "train: phase 1 needs a calibrated model");
  return run_one_phase(cfg, ck.model, train, eval, teacher_ptr, out, ph);
}

// ---- report ------------------------------------------------------------------

int cmd_verify_table8() {
  static const char* kCats[7] = {"total",     "mvm", "first",   "last",
                                 "bn_params", "act", "last_act"};
  const auto rows = verify_reference_counts();
  bool all_ok = true;
  for (const auto& r : rows) {
    std::printf("%-14s %s\n", r.arch.c_str(), r.pass ? "PASS" : "FAIL");
    if (!r.pass) {
      all_ok = false;
      for (int i = 0; i < 7; ++i)
        if (r.got[i] != r.want[i])
          std::printf("  %s: got %llu want %llu\n", kCats[i],
                      (unsigned long long)r.got[i],
                      (unsigned long long)r.want[i]);
    }
  }
  return all_ok ? 0 : 2;
}

int cmd_report(const RunConfig& cfg, const std::string& ckpt,
               const std::string& out, const std::string& bias_policy_name,
               bool exempt) {
  Checkpoint ck = load_checkpoint(ckpt);
  Model& m = ck.model;
  require(m.quant_enabled && m.all_frozen(),
          "report: checkpoint must hold a frozen quantized model");
  const BiasPolicy policy = parse_bias_policy(
      bias_policy_name.empty() ? cfg.bias_policy : bias_policy_name);

  FootprintReport fp;
  if (exempt) {
    Exemptions ex;
    ex.first_last_bfloat16 = true;
    fp = exemption_footprint(m, ex, policy);
  } else {
    fp = footprint(m, policy);
  }

  std::filesystem::create_directories(out);
  const std::string path = out + "/bit_allocation.csv";
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "cannot open '" + path + "'");
  f << "# schema=mixquant-bitalloc-v1\n";
  f << "layer,w_bits_min,w_bits_mean,w_bits_max,act_bits,weight_bytes,"
       "act_bytes\n";
  for (const auto& r : bit_allocation_report(m)) {
    auto num = [](double v) {
      char b[32];
      std::snprintf(b, sizeof(b), "%.6g", v);
      return std::string(b);
    };
    f << r.layer << ',' << (r.has_weight ? num(r.w_bits_min) : std::string())
      << ',' << (r.has_weight ? num(r.w_bits_mean) : std::string()) << ','
      << (r.has_weight ? num(r.w_bits_max) : std::string()) << ','
      << (r.has_act ? num(r.act_bits) : std::string()) << ','
      << r.weight_bytes << ',' << r.act_bytes << "\n";
  }
  std::printf("wrote %s\n", path.c_str());

  Dataset train, eval;
  load_datasets(cfg, train, eval);
  EvalResult ev = evaluate(m, eval, 64, env_threads());
  std::printf("footprint: weights=%llu activations=%llu bn=%llu bias=%llu "
              "total=%llu bytes (%.4f MiB)\n",
              (unsigned long long)fp.weight_bytes,
              (unsigned long long)fp.activation_bytes,
              (unsigned long long)fp.bn_bytes,
              (unsigned long long)fp.bias_bytes,
              (unsigned long long)fp.total_bytes,
              double(fp.total_bytes) / double(kMebibyte));
  std::printf("pareto,%llu,%.6f\n", (unsigned long long)fp.total_bytes,
              1.0 - ev.accuracy);
  return 0;
}

// ---- bench-gradscale -----------------------------------------------------------

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_bench(const RunConfig& cfg, const std::string& out, int trials) {
  require(trials >= 1, "bench: trials must be >= 1");
  Dataset train, eval;
  load_datasets(cfg, train, eval);
  std::filesystem::create_directories(out);

  const GradScaleRule ste = make_rule(ScaleKind::STE);
  const GradScaleRule wrule = cfg.weight_rule.resolve();
  const GradScaleRule arule = cfg.act_rule.resolve();
  struct BenchConfig {
    std::string name;
    RuleConfig rules;
  };
  const std::vector<BenchConfig> configs = {
      {"ste_ste", {ste, ste}},
      {"weight_scaled", {wrule, ste}},
      {"act_scaled", {ste, arule}},
      {"both_scaled", {wrule, arule}},
  };

  const std::string trials_path = out + "/bench_trials.csv";
  std::ofstream tf(trials_path, std::ios::trunc);
  require(tf.good(), "cannot open '" + trials_path + "'");
  tf << "# schema=mixquant-benchtrials-v1\n";
  tf << "config,trial,seed,accuracy,mean_step_ms_nondet\n";

  std::vector<double> mean_ms(configs.size(), 0.0);
  std::vector<std::vector<double>> accs(configs.size());
  for (std::size_t c = 0; c < configs.size(); ++c) {
    double total_ms = 0.0;
    long long total_steps = 0;
    for (int trial = 0; trial < trials; ++trial) {
      RunConfig tc = cfg;
      tc.seed = cfg.seed + std::uint64_t(trial);
      Dataset ttrain, teval;
      load_datasets(tc, ttrain, teval);
      Model m = calibrated_model(tc, ttrain);
      PhasePlan plan = plan_for_phase(tc, 1);
      plan.steps_per_epoch =
          int(ttrain.count() / std::size_t(plan.batch_size));

      TrainSession s;
      s.model = &m;
      s.train = &ttrain;
      s.eval = &teval;
      s.plan = plan;
      s.rules = configs[c].rules;
      s.seed = tc.seed;
      s.threads = env_threads();

      const auto t0 = std::chrono::steady_clock::now();
      PhaseOutcome oc = run_phase1_pretrain(s);
      const double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
      if (oc.exit_code != 0) {
        std::fprintf(stderr, "bench trial aborted: %s\n",
                     oc.abort_reason.c_str());
        return 3;
      }
      total_ms += ms;
      total_steps += oc.steps_run;
      accs[c].push_back(oc.final_eval_acc);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6g,%.6g", oc.final_eval_acc,
                    ms / double(oc.steps_run));
      tf << configs[c].name << ',' << trial << ',' << tc.seed << ',' << buf
         << "\n";
    }
    mean_ms[c] = total_ms / double(total_steps);
  }

  const std::string summary_path = out + "/bench_summary.csv";
  std::ofstream sf(summary_path, std::ios::trunc);
  require(sf.good(), "cannot open '" + summary_path + "'");
  sf << "# schema=mixquant-benchsummary-v1\n";
  sf << "config,median_accuracy,overhead_pct_nondet\n";
  for (std::size_t c = 0; c < configs.size(); ++c) {
    const double med = median_of(accs[c]);
    const double overhead =
        (mean_ms[c] - mean_ms[0]) / mean_ms[0] * 100.0;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g,%.6g", med, overhead);
    sf << configs[c].name << ',' << buf << "\n";
    std::printf("bench %-14s median_acc=%.4f overhead=%.1f%%\n",
                configs[c].name.c_str(), med, overhead);
  }
  std::printf("wrote %s and %s\n", trials_path.c_str(), summary_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-precision quantization-aware training toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", phase = "all", ckpt;
  std::string bias_policy;
  std::uint64_t seed_override = 0;
  bool seed_given = false, grid = false, verify8 = false, exempt = false;
  int trials = 10;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "run config JSON");
    if (config_required) opt->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed_override, "override the config seed")
        ->each([&](const std::string&) { seed_given = true; });
  };

  auto* cal = app.add_subcommand("calibrate", "initialize quantizer grids");
  add_common(cal, true);
  cal->add_flag("--grid", grid, "emit the calibration-method grid CSV");

  auto* tr = app.add_subcommand("train", "run the three-phase schedule");
  add_common(tr, true);
  tr->add_option("--phase", phase, "1 | 2 | 3 | all");

  auto* rep = app.add_subcommand("report", "bit allocation and footprint");
  add_common(rep, false);
  rep->add_option("--checkpoint", ckpt, "frozen checkpoint to report on");
  rep->add_option("--bias-policy", bias_policy,
                  "quantized_bias | bfloat16_bias");
  rep->add_flag("--exempt-first-last", exempt,
                "apply the first/last-layer bfloat16 exemption");
  rep->add_flag("--verify-table8", verify8,
                "verify the reference parameter-count table");

  auto* bench = app.add_subcommand("bench-gradscale",
                                   "seeded gradient-scaling comparisons");
  add_common(bench, true);
  bench->add_option("--trials", trials, "trials per configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (rep->parsed() && verify8) return cmd_verify_table8();

    require(!config_path.empty(), "a --config file is required");
    RunConfig cfg = load_config(config_path);
    if (seed_given) cfg.seed = seed_override;
    validate_config(cfg);

    if (cal->parsed()) return cmd_calibrate(cfg, out_dir, grid);
    if (tr->parsed()) return cmd_train(cfg, out_dir, phase);
    if (rep->parsed()) {
      require(!ckpt.empty(), "report needs --checkpoint (or --verify-table8)");
      return cmd_report(cfg, ckpt, out_dir, bias_policy, exempt);
    }
    if (bench->parsed()) return cmd_bench(cfg, out_dir, trials);
    return 1;
  } catch (const error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
