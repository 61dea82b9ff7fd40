#pragma once

// JSON run configuration. One self-contained document drives calibration,
// the three training phases, the size budget, and reporting; parsing the
// serialized form reproduces the struct exactly (field-for-field equality),
// which the tests rely on.

#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "grad_scale.hpp"
#include "model.hpp"
#include "penalty.hpp"
#include "scheduler.hpp"
#include "size_accountant.hpp"

namespace mixquant {

struct DatasetSource {
  std::string source = "synthetic";  // synthetic | file
  int train_count = 1280;
  int eval_count = 320;
  std::string train_path;    // MQDS file when source = file
  std::string eval_path;     // MQDS file when source = file
  std::string teacher_path;  // MQTL file, only read when KD is on

  bool operator==(const DatasetSource&) const = default;
};

struct CalibrationConfig {
  std::string weights = "gaussian";
  std::string acts = "p99.9";
  int bits = 4;        // homogeneous starting width
  int batch_size = 64; // samples in the calibration batch

  bool operator==(const CalibrationConfig&) const = default;
};

struct RuleSpec {
  std::string kind = "ste";
  double delta = 5e-3;
  double alpha = 0.0;  // 0 = kind default

  bool operator==(const RuleSpec&) const = default;

  GradScaleRule resolve() const {
    GradScaleRule r = make_rule(parse_scale_kind(kind), delta);
    if (alpha != 0.0) r.alpha = alpha;
    r.validate();
    return r;
  }
};

struct PlanConfig {
  std::vector<int> epochs_per_phase{5, 10, 5};
  int phi = 20;
  int warmup_epochs = 1;
  double lr_peak = 2e-3;
  double quant_lr_peak = 0.05;
  double weight_decay = 1e-5;
  double label_smoothing = 0.1;
  double momentum = 0.9;
  int batch_size = 32;
  double ramp_fraction = 0.5;

  bool operator==(const PlanConfig&) const = default;
};

struct BudgetConfig {
  std::string mode = "fraction";  // fraction | bytes
  double fraction = 0.5;          // of the homogeneous reference footprint
  int reference_bits = 8;
  double weight_bytes = 0.0;  // explicit targets when mode = bytes
  double act_bytes = 0.0;
  double margin = 0.8;  // effective target = margin * stated target
  double beta_final = 2e-6;

  bool operator==(const BudgetConfig&) const = default;
};

struct KDSpec {
  std::string mode = "off";  // off | soft_label | penalty_hook
  double temperature = 4.0;
  double weight = 1.0;

  bool operator==(const KDSpec&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  MiniConfig model;
  DatasetSource data;
  CalibrationConfig calibration;
  RuleSpec weight_rule;
  RuleSpec act_rule;
  PlanConfig plan;
  BudgetConfig budget;
  KDSpec kd;
  std::string bias_policy = "quantized_bias";
  bool exempt_first_last = false;

  bool operator==(const RunConfig& o) const {
    auto stages_eq = [&] {
      if (model.stages.size() != o.model.stages.size()) return false;
      for (std::size_t i = 0; i < model.stages.size(); ++i) {
        const auto& a = model.stages[i];
        const auto& b = o.model.stages[i];
        if (a.width != b.width || a.depth != b.depth ||
            a.stride != b.stride || a.expansion != b.expansion)
          return false;
      }
      return true;
    };
    return seed == o.seed && model.input_channels == o.model.input_channels &&
           model.input_hw == o.model.input_hw &&
           model.classes == o.model.classes &&
           model.stem_width == o.model.stem_width && stages_eq() &&
           data == o.data && calibration == o.calibration &&
           weight_rule == o.weight_rule && act_rule == o.act_rule &&
           plan == o.plan && budget == o.budget && kd == o.kd &&
           bias_policy == o.bias_policy &&
           exempt_first_last == o.exempt_first_last;
  }
};

// ---- JSON mapping -----------------------------------------------------------

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["model"]["input_channels"] = c.model.input_channels;
  j["model"]["input_hw"] = c.model.input_hw;
  j["model"]["classes"] = c.model.classes;
  j["model"]["stem_width"] = c.model.stem_width;
  auto stages = nlohmann::json::array();
  for (const auto& s : c.model.stages)
    stages.push_back({s.width, s.depth, s.stride, s.expansion});
  j["model"]["stages"] = stages;
  j["data"] = {{"source", c.data.source},
               {"train_count", c.data.train_count},
               {"eval_count", c.data.eval_count},
               {"train_path", c.data.train_path},
               {"eval_path", c.data.eval_path},
               {"teacher_path", c.data.teacher_path}};
  j["calibration"] = {{"weights", c.calibration.weights},
                      {"acts", c.calibration.acts},
                      {"bits", c.calibration.bits},
                      {"batch_size", c.calibration.batch_size}};
  j["weight_rule"] = {{"kind", c.weight_rule.kind},
                      {"delta", c.weight_rule.delta},
                      {"alpha", c.weight_rule.alpha}};
  j["act_rule"] = {{"kind", c.act_rule.kind},
                   {"delta", c.act_rule.delta},
                   {"alpha", c.act_rule.alpha}};
  j["plan"] = {{"epochs_per_phase", c.plan.epochs_per_phase},
               {"phi", c.plan.phi},
               {"warmup_epochs", c.plan.warmup_epochs},
               {"lr_peak", c.plan.lr_peak},
               {"quant_lr_peak", c.plan.quant_lr_peak},
               {"weight_decay", c.plan.weight_decay},
               {"label_smoothing", c.plan.label_smoothing},
               {"momentum", c.plan.momentum},
               {"batch_size", c.plan.batch_size},
               {"ramp_fraction", c.plan.ramp_fraction}};
  j["budget"] = {{"mode", c.budget.mode},
                 {"fraction", c.budget.fraction},
                 {"reference_bits", c.budget.reference_bits},
                 {"weight_bytes", c.budget.weight_bytes},
                 {"act_bytes", c.budget.act_bytes},
                 {"margin", c.budget.margin},
                 {"beta_final", c.budget.beta_final}};
  j["kd"] = {{"mode", c.kd.mode},
             {"temperature", c.kd.temperature},
             {"weight", c.kd.weight}};
  j["bias_policy"] = c.bias_policy;
  j["exempt_first_last"] = c.exempt_first_last;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.value("seed", std::uint64_t(1));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.input_channels = m.value("input_channels", c.model.input_channels);
    c.model.input_hw = m.value("input_hw", c.model.input_hw);
    c.model.classes = m.value("classes", c.model.classes);
    c.model.stem_width = m.value("stem_width", c.model.stem_width);
    if (m.contains("stages")) {
      c.model.stages.clear();
      for (const auto& s : m.at("stages")) {
        require(s.is_array() && s.size() == 4,
                "config: each stage is [width, depth, stride, expansion]");
        c.model.stages.push_back(
            {s[0].get<int>(), s[1].get<int>(), s[2].get<int>(),
             s[3].get<int>()});
      }
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.source = d.value("source", c.data.source);
    c.data.train_count = d.value("train_count", c.data.train_count);
    c.data.eval_count = d.value("eval_count", c.data.eval_count);
    c.data.train_path = d.value("train_path", c.data.train_path);
    c.data.eval_path = d.value("eval_path", c.data.eval_path);
    c.data.teacher_path = d.value("teacher_path", c.data.teacher_path);
  }
  if (j.contains("calibration")) {
    const auto& a = j.at("calibration");
    c.calibration.weights = a.value("weights", c.calibration.weights);
    c.calibration.acts = a.value("acts", c.calibration.acts);
    c.calibration.bits = a.value("bits", c.calibration.bits);
    c.calibration.batch_size = a.value("batch_size", c.calibration.batch_size);
  }
  auto read_rule = [&](const char* key, RuleSpec& r) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    r.kind = v.value("kind", r.kind);
    r.delta = v.value("delta", r.delta);
    r.alpha = v.value("alpha", r.alpha);
  };
  read_rule("weight_rule", c.weight_rule);
  read_rule("act_rule", c.act_rule);
  if (j.contains("plan")) {
    const auto& p = j.at("plan");
    if (p.contains("epochs_per_phase"))
      c.plan.epochs_per_phase =
          p.at("epochs_per_phase").get<std::vector<int>>();
    c.plan.phi = p.value("phi", c.plan.phi);
    c.plan.warmup_epochs = p.value("warmup_epochs", c.plan.warmup_epochs);
    c.plan.lr_peak = p.value("lr_peak", c.plan.lr_peak);
    c.plan.quant_lr_peak = p.value("quant_lr_peak", c.plan.quant_lr_peak);
    c.plan.weight_decay = p.value("weight_decay", c.plan.weight_decay);
    c.plan.label_smoothing =
        p.value("label_smoothing", c.plan.label_smoothing);
    c.plan.momentum = p.value("momentum", c.plan.momentum);
    c.plan.batch_size = p.value("batch_size", c.plan.batch_size);
    c.plan.ramp_fraction = p.value("ramp_fraction", c.plan.ramp_fraction);
  }
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    c.budget.mode = b.value("mode", c.budget.mode);
    c.budget.fraction = b.value("fraction", c.budget.fraction);
    c.budget.reference_bits = b.value("reference_bits", c.budget.reference_bits);
    c.budget.weight_bytes = b.value("weight_bytes", c.budget.weight_bytes);
    c.budget.act_bytes = b.value("act_bytes", c.budget.act_bytes);
    c.budget.margin = b.value("margin", c.budget.margin);
    c.budget.beta_final = b.value("beta_final", c.budget.beta_final);
  }
  if (j.contains("kd")) {
    const auto& k = j.at("kd");
    c.kd.mode = k.value("mode", c.kd.mode);
    c.kd.temperature = k.value("temperature", c.kd.temperature);
    c.kd.weight = k.value("weight", c.kd.weight);
  }
  c.bias_policy = j.value("bias_policy", c.bias_policy);
  c.exempt_first_last = j.value("exempt_first_last", c.exempt_first_last);
  return c;
}

inline std::string serialize_config(const RunConfig& c) {
  return to_json(c).dump(2) + "\n";
}

inline RunConfig parse_config(const std::string& text) {
  return config_from_json(nlohmann::json::parse(text));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  try {
    return parse_config(text);
  } catch (const nlohmann::json::exception& e) {
    fail("config '" + path + "': " + e.what());
  }
}

// ---- Resolution helpers -------------------------------------------------------

inline void validate_config(const RunConfig& c) {
  c.model.validate();
  require(c.data.source == "synthetic" || c.data.source == "file",
          "config: data.source must be synthetic or file");
  if (c.data.source == "synthetic")
    require(c.data.train_count >= 1 && c.data.eval_count >= 1,
            "config: synthetic sample counts must be positive");
  else
    require(!c.data.train_path.empty() && !c.data.eval_path.empty(),
            "config: file data source needs train_path and eval_path");
  CalibMethod::parse(c.calibration.weights);
  CalibMethod::parse(c.calibration.acts);
  require(c.calibration.bits >= 1 && c.calibration.bits <= kMaxBits,
          "config: calibration bits out of range");
  require(c.calibration.batch_size >= 1,
          "config: calibration batch_size must be >= 1");
  c.weight_rule.resolve();
  c.act_rule.resolve();
  require(c.plan.epochs_per_phase.size() == 3,
          "config: plan.epochs_per_phase must list exactly three phases");
  for (int e : c.plan.epochs_per_phase)
    require(e >= 1, "config: every phase needs at least one epoch");
  require(c.budget.mode == "fraction" || c.budget.mode == "bytes",
          "config: budget.mode must be fraction or bytes");
  if (c.budget.mode == "fraction")
    require(c.budget.fraction > 0 && c.budget.fraction <= 1 &&
                c.budget.reference_bits >= 1,
            "config: budget fraction out of range");
  else
    require(c.budget.weight_bytes > 0 && c.budget.act_bytes > 0,
            "config: explicit budget needs positive byte targets");
  require(c.budget.margin > 0 && c.budget.margin <= 1,
          "config: budget.margin must lie in (0, 1]");
  require(c.budget.beta_final > 0, "config: beta_final must be positive");
  parse_kd_mode(c.kd.mode);
  require(c.kd.temperature > 0, "config: kd.temperature must be positive");
  require(c.kd.weight >= 0, "config: kd.weight must be >= 0");
  parse_bias_policy(c.bias_policy);
}

inline PhasePlan plan_for_phase(const RunConfig& c, int phase) {
  require(phase >= 1 && phase <= 3, "plan: phase must be 1, 2 or 3");
  PhasePlan p;
  p.epochs_per_phase = c.plan.epochs_per_phase[std::size_t(phase - 1)];
  p.phi = c.plan.phi;
  p.warmup_epochs = std::min(c.plan.warmup_epochs, p.epochs_per_phase - 1);
  p.lr_peak = c.plan.lr_peak;
  p.quant_lr_peak = c.plan.quant_lr_peak;
  p.weight_decay = c.plan.weight_decay;
  p.label_smoothing = c.plan.label_smoothing;
  p.momentum = c.plan.momentum;
  p.batch_size = c.plan.batch_size;
  p.ramp_fraction = c.plan.ramp_fraction;
  return p;
}

// Bit-level penalty targets. Stated targets are scaled by the safety margin;
// with mode = fraction they come from the homogeneous reference footprint,
// with mode = bytes from explicit byte counts (1 byte = 8 bits).
inline SizeBudget budget_from_config(const RunConfig& c, const Model& m,
                                     long long phase2_steps) {
  SizeBudget b;
  if (c.budget.mode == "fraction") {
    const SizeTerms ref = homogeneous_bits(m, c.budget.reference_bits);
    b.t_w_bits = c.budget.margin * c.budget.fraction * ref.weight_bits;
    b.t_a_bits = c.budget.margin * c.budget.fraction * ref.act_bits;
  } else {
    b.t_w_bits = c.budget.margin * c.budget.weight_bytes * 8.0;
    b.t_a_bits = c.budget.margin * c.budget.act_bytes * 8.0;
  }
  b.beta_final = c.budget.beta_final;
  b.ramp_steps = int(std::max<long long>(
      1, (long long)(c.plan.ramp_fraction * double(phase2_steps))));
  b.validate();
  return b;
}

inline KDConfig<float> kd_from_config(const RunConfig& c) {
  KDConfig<float> k;
  k.mode = parse_kd_mode(c.kd.mode);
  k.temperature = c.kd.temperature;
  k.kd_weight = c.kd.weight;
  k.teacher_logits_path = c.data.teacher_path;
  return k;
}

inline RuleConfig rules_from_config(const RunConfig& c) {
  RuleConfig r;
  r.weights = c.weight_rule.resolve();
  r.acts = c.act_rule.resolve();
  return r;
}

// Synthesize or load the train/eval pair named by the config.
inline void load_datasets(const RunConfig& c, Dataset& train, Dataset& eval) {
  if (c.data.source == "synthetic") {
    train = make_synthetic_dataset(c.seed, c.data.train_count,
                                   c.model.classes, c.model.input_channels,
                                   c.model.input_hw, /*split_tag=*/1);
    eval = make_synthetic_dataset(c.seed, c.data.eval_count, c.model.classes,
                                  c.model.input_channels, c.model.input_hw,
                                  /*split_tag=*/2);
  } else {
    train = load_dataset(c.data.train_path);
    eval = load_dataset(c.data.eval_path);
  }
  train.validate();
  eval.validate();
}

}  // namespace mixquant
