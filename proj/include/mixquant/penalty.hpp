#pragma once

// Size-penalty objective pieces: the ramped modulating factor beta and the
// rectified quadratic terms beta * max(sum - target, 0)^2 applied to the
// weight-bit and activation-bit totals. One beta multiplies both terms.

#include <cmath>
#include <functional>
#include <string>

#include "ops.hpp"

namespace mixquant {

struct SizeBudget {
  double t_w_bits = 0.0;
  double t_a_bits = 0.0;
  double beta_final = 0.0;
  int ramp_steps = 1;

  void validate() const {
    require(t_w_bits > 0.0 && t_a_bits > 0.0, "budget: targets must be positive");
    require(beta_final >= 0.0, "budget: beta_final must be >= 0");
    require(ramp_steps >= 1, "budget: ramp_steps must be >= 1");
  }

  // Linear ramp over the first ramp_steps in-phase steps (1-based step index).
  double beta_at(long long step) const {
    const double frac = double(step) / double(ramp_steps);
    return beta_final * std::min(1.0, frac);
  }
};

enum class KDMode { off, soft_label, penalty_hook };

inline KDMode parse_kd_mode(const std::string& s) {
  if (s == "off") return KDMode::off;
  if (s == "soft_label") return KDMode::soft_label;
  if (s == "penalty_hook") return KDMode::penalty_hook;
  fail("kd: unknown mode '" + s + "'");
}

inline std::string kd_mode_name(KDMode m) {
  switch (m) {
    case KDMode::off: return "off";
    case KDMode::soft_label: return "soft_label";
    case KDMode::penalty_hook: return "penalty_hook";
  }
  fail("kd: bad mode");
}

template <typename T>
struct KDConfig {
  KDMode mode = KDMode::off;
  double temperature = 1.0;
  double kd_weight = 1.0;
  std::string teacher_logits_path;
  // penalty_hook mode: an externally supplied scalar term added to the loss.
  std::function<NodePtr<T>(Tape<T>&, NodePtr<T> /*student_logits*/)> hook;

  void validate() const {
    require(temperature > 0.0, "kd: temperature must be positive");
    require(kd_weight >= 0.0, "kd: weight must be >= 0");
    if (mode == KDMode::penalty_hook)
      require(bool(hook), "kd: penalty_hook mode needs a hook callable");
  }
};

// max(sum - target, 0)^2 scaled by beta, as a tape node. Exactly zero (value
// and gradient) at or under the target.
template <typename T>
NodePtr<T> rectified_quadratic(Tape<T>& t, NodePtr<T> sum_bits, double target,
                               double beta) {
  require(sum_bits->value.size() == 1, "penalty: bit total must be scalar");
  auto over = add_scalar(t, sum_bits, T(-target));
  auto rect = relu(t, over);
  auto sq = mul(t, rect, rect);
  return mul_scalar(t, sq, T(beta));
}

inline double rectified_quadratic_value(double sum_bits, double target,
                                        double beta) {
  const double over = sum_bits - target;
  return over > 0.0 ? beta * over * over : 0.0;
}

}  // namespace mixquant
