#pragma once

// Input-gradient scaling rules applied inside the quantizer backward pass:
// straight-through plus five shaped rules and two noise baselines. Factors
// are 1 + delta * term(residual); residuals live in step units, [-0.5, 0.5].

#include <cmath>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

namespace mixquant {

enum class ScaleKind {
  STE,
  PBGS,
  EWGS,
  Acos,
  Tanh,
  InvTanh,
  GaussianNoise,
  UniformNoise,
};

struct GradScaleRule {
  ScaleKind kind = ScaleKind::STE;
  double delta = 5e-3;
  double alpha = 1.0;  // steepness, Tanh/InvTanh only

  void validate() const {
    require(delta >= 0.0, "grad scale: delta must be >= 0");
    require(alpha > 0.0, "grad scale: alpha must be > 0");
    if (kind == ScaleKind::InvTanh)
      require(alpha * 0.5 < 1.0,
              "grad scale: InvTanh needs alpha*0.5 < 1 to stay in-domain");
  }
};

inline bool is_noise_rule(ScaleKind k) {
  return k == ScaleKind::GaussianNoise || k == ScaleKind::UniformNoise;
}

// Default alpha differs per kind: 1.0 for Tanh, 1.9 for InvTanh (largest
// steepness keeping arctanh in-domain on [-0.5, 0.5]).
inline GradScaleRule make_rule(ScaleKind kind, double delta = 5e-3) {
  GradScaleRule r;
  r.kind = kind;
  r.delta = delta;
  r.alpha = (kind == ScaleKind::InvTanh) ? 1.9 : 1.0;
  r.validate();
  return r;
}

inline ScaleKind parse_scale_kind(const std::string& s) {
  if (s == "ste") return ScaleKind::STE;
  if (s == "pbgs") return ScaleKind::PBGS;
  if (s == "ewgs") return ScaleKind::EWGS;
  if (s == "acos") return ScaleKind::Acos;
  if (s == "tanh") return ScaleKind::Tanh;
  if (s == "invtanh") return ScaleKind::InvTanh;
  if (s == "gaussian_noise") return ScaleKind::GaussianNoise;
  if (s == "uniform_noise") return ScaleKind::UniformNoise;
  fail("unknown gradient scale rule: " + s);
}

inline std::string scale_kind_name(ScaleKind k) {
  switch (k) {
    case ScaleKind::STE: return "ste";
    case ScaleKind::PBGS: return "pbgs";
    case ScaleKind::EWGS: return "ewgs";
    case ScaleKind::Acos: return "acos";
    case ScaleKind::Tanh: return "tanh";
    case ScaleKind::InvTanh: return "invtanh";
    case ScaleKind::GaussianNoise: return "gaussian_noise";
    case ScaleKind::UniformNoise: return "uniform_noise";
  }
  fail("unreachable scale kind");
}

// Multiplicative factor for one element. noise_value is the pre-drawn sample
// for the noise rules (ignored otherwise); grad_sign is the sign of the
// element's own upstream gradient, with sign(0) contributing a zero term.
inline double scale_factor(double residual, int grad_sign,
                           const GradScaleRule& rule, double noise_value = 0.0) {
  require(std::abs(residual) <= 0.5 + 1e-12,
          "grad scale: residual outside [-0.5, 0.5]");
  switch (rule.kind) {
    case ScaleKind::STE:
      return 1.0;
    case ScaleKind::PBGS:
      return 1.0 + rule.delta * std::abs(residual);
    case ScaleKind::EWGS:
      return 1.0 + rule.delta * double(grad_sign) * residual;
    case ScaleKind::Acos:
      return 1.0 + rule.delta * std::sin(std::numbers::pi * residual);
    case ScaleKind::Tanh:
      return 1.0 +
             rule.delta * double(grad_sign) * std::tanh(rule.alpha * residual);
    case ScaleKind::InvTanh: {
      const double u = rule.alpha * residual;
      require(std::abs(u) < 1.0, "grad scale: InvTanh argument out of domain");
      return 1.0 + rule.delta * double(grad_sign) * std::atanh(u);
    }
    case ScaleKind::GaussianNoise:
    case ScaleKind::UniformNoise:
      return 1.0 + rule.delta * noise_value;
  }
  fail("unreachable scale kind");
}

// Convenience overload drawing the noise sample from a stream.
inline double scale_factor(double residual, int grad_sign,
                           const GradScaleRule& rule, RngStream& rng) {
  double noise = 0.0;
  if (rule.kind == ScaleKind::GaussianNoise)
    noise = rng.next_gaussian();
  else if (rule.kind == ScaleKind::UniformNoise)
    noise = rng.next_uniform() - 0.5;
  return scale_factor(residual, grad_sign, rule, noise);
}

inline double noise_draw(ScaleKind kind, std::uint64_t key, std::uint64_t index) {
  if (kind == ScaleKind::GaussianNoise) return keyed_gaussian(key, index);
  if (kind == ScaleKind::UniformNoise) return keyed_uniform_pm_half(key, index);
  return 0.0;
}

template <typename T>
inline int sign_of(T v) {
  return v > T(0) ? 1 : (v < T(0) ? -1 : 0);
}

// Elementwise application: saturated elements (clip_mask != 0) pass the
// upstream gradient through unscaled; interior elements are multiplied by
// the rule factor. noise_key addresses the per-element, per-step noise draw.
template <typename T>
Tensor<T> apply_to_gradient(const Tensor<T>& upstream,
                            const Tensor<T>& residuals, const GradScaleRule& rule,
                            const Tensor<T>& clip_mask,
                            std::uint64_t noise_key = 0) {
  require(upstream.shape == residuals.shape,
          "apply_to_gradient: gradient shape " + shape_str(upstream.shape) +
              " vs residual shape " + shape_str(residuals.shape));
  require(upstream.shape == clip_mask.shape,
          "apply_to_gradient: gradient shape " + shape_str(upstream.shape) +
              " vs mask shape " + shape_str(clip_mask.shape));
  rule.validate();
  Tensor<T> out(upstream.shape);
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    if (clip_mask[i] != T(0)) {
      out[i] = upstream[i];
      continue;
    }
    const double noise = noise_draw(rule.kind, noise_key, i);
    const double f = scale_factor(double(residuals[i]), sign_of(upstream[i]),
                                  rule, noise);
    out[i] = T(double(upstream[i]) * f);
  }
  return out;
}

}  // namespace mixquant
