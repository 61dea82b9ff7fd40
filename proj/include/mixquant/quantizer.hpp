#pragma once

// Learnable symmetric uniform fake quantization with per-tensor or
// per-output-channel granularity. Trainable state is kept in log space
// (log d, log q_max), which guarantees positivity and makes the floor
// constraints plain clamps; the tape sees d and q_max through exp nodes.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "grad_scale.hpp"
#include "ops.hpp"

namespace mixquant {

enum class Granularity { per_tensor, per_channel };
enum class Signedness { signed_sym, unsigned_sym };

constexpr double kLn2 = 0.6931471805599453;
constexpr float kMinStep = 1e-6f;
constexpr int kMaxBits = 16;

struct SliceRecord {
  int slice = 0;
  double bits = 0.0;
  double d = 0.0;
  double q_max = 0.0;
};

struct QuantizerState {
  std::string name;
  Granularity granularity = Granularity::per_tensor;
  Signedness signedness = Signedness::signed_sym;
  bool trainable = true;
  int slices = 1;
  std::vector<float> log_d, log_q;

  bool frozen = false;
  std::vector<int> frozen_bits;
  std::vector<float> frozen_d, frozen_q;

  static QuantizerState make(std::string name, Granularity g, Signedness s,
                             int slices) {
    require(slices >= 1, "quantizer: slice count must be >= 1");
    QuantizerState q;
    q.name = std::move(name);
    q.granularity = g;
    q.signedness = s;
    q.slices = g == Granularity::per_tensor ? 1 : slices;
    q.log_d.assign(std::size_t(q.slices), 0.0f);
    q.log_q.assign(std::size_t(q.slices), float(kLn2));
    return q;
  }

  void set_slice(int s, double d, double q_max) {
    require(d > 0.0 && q_max > 0.0,
            "quantizer " + name + ": d and q_max must be positive");
    require(q_max >= d, "quantizer " + name + ": q_max must be >= d");
    log_d[std::size_t(s)] = float(std::log(d));
    log_q[std::size_t(s)] = float(std::log(q_max));
  }

  double step(int s) const {
    return frozen ? double(frozen_d[std::size_t(s)])
                  : std::exp(double(log_d[std::size_t(s)]));
  }
  double range(int s) const {
    return frozen ? double(frozen_q[std::size_t(s)])
                  : std::exp(double(log_q[std::size_t(s)]));
  }

  // Continuous bit-width log2(q_max / d); integral after freeze.
  double effective_bits(int s = 0) const {
    if (frozen) return double(frozen_bits[std::size_t(s)]);
    return (double(log_q[std::size_t(s)]) - double(log_d[std::size_t(s)])) / kLn2;
  }

  // Applied after every optimizer step: d >= kMinStep and q_max >= 2d.
  void clamp_floors() {
    const float lo_d = std::log(kMinStep);
    for (int s = 0; s < slices; ++s) {
      if (log_d[std::size_t(s)] < lo_d) log_d[std::size_t(s)] = lo_d;
      const float lo_q = log_d[std::size_t(s)] + float(kLn2);
      if (log_q[std::size_t(s)] < lo_q) log_q[std::size_t(s)] = lo_q;
    }
  }

  // b = ceil(effective_bits) clamped to [1, 16]; q_max becomes d * 2^b
  // exactly. The 1e-6 guard absorbs float noise in the log ratio at exact
  // powers of two.
  void freeze() {
    require(!frozen, "quantizer " + name + ": already frozen");
    frozen_bits.resize(std::size_t(slices));
    frozen_d.resize(std::size_t(slices));
    frozen_q.resize(std::size_t(slices));
    for (int s = 0; s < slices; ++s) {
      const double eb = effective_bits(s);
      int b = int(std::ceil(eb - 1e-6));
      b = std::min(std::max(b, 1), kMaxBits);
      const float d = std::exp(log_d[std::size_t(s)]);
      frozen_bits[std::size_t(s)] = b;
      frozen_d[std::size_t(s)] = d;
      frozen_q[std::size_t(s)] = std::ldexp(d, b);
    }
    frozen = true;
  }

  std::vector<SliceRecord> slice_report() const {
    std::vector<SliceRecord> out;
    out.reserve(std::size_t(slices));
    for (int s = 0; s < slices; ++s)
      out.push_back({s, effective_bits(s), step(s), range(s)});
    return out;
  }

  std::uint64_t state_hash() const {
    std::uint64_t h = fnv1a(log_d.data(), log_d.size() * sizeof(float));
    h = fnv1a(log_q.data(), log_q.size() * sizeof(float), h);
    h = fnv1a(&frozen, sizeof(frozen), h);
    if (frozen) {
      h = fnv1a(frozen_bits.data(), frozen_bits.size() * sizeof(int), h);
      h = fnv1a(frozen_d.data(), frozen_d.size() * sizeof(float), h);
      h = fnv1a(frozen_q.data(), frozen_q.size() * sizeof(float), h);
    }
    return h;
  }
};

namespace detail {

// Leading-axis slice lookup: per-channel quantizers slice on dim 0.
struct SliceMap {
  int slices = 1;
  std::size_t per_slice = 0;

  SliceMap(const QuantizerState& q, const std::vector<int>& shape,
           std::size_t total) {
    if (q.granularity == Granularity::per_channel) {
      require(shape[0] == q.slices,
              "quantizer " + q.name + ": leading axis " +
                  std::to_string(shape[0]) + " vs slice count " +
                  std::to_string(q.slices));
      slices = q.slices;
    }
    per_slice = total / std::size_t(slices);
  }

  int slice_of(std::size_t flat) const { return int(flat / per_slice); }
};

template <typename T>
inline void check_positive_params(const std::string& name, const T* d,
                                  const T* qm, int slices) {
  for (int s = 0; s < slices; ++s) {
    require(d[s] > T(0), "quantizer " + name + ": non-positive step size");
    require(qm[s] > T(0), "quantizer " + name + ": non-positive dynamic range");
  }
}

// Forward for one element. Codes are clamped to floor(q_max/d) so outputs
// never leave the representable grid even while q_max/d is non-integral.
template <typename T>
inline T fq_element(T x, T d, T n, bool is_signed, long long kmax,
                    long long* code_out = nullptr) {
  const T lo = is_signed ? -n : T(0);
  T z = x / d;
  if (z < lo) z = lo;
  if (z > n) z = n;
  long long code = (long long)(round_away(z));
  if (code > kmax) code = kmax;
  const long long kmin = is_signed ? -kmax : 0;
  if (code < kmin) code = kmin;
  if (code_out) *code_out = code;
  return T(code) * d;
}

template <typename T>
struct FqParams {
  std::vector<T> n;     // q_max / d per slice
  std::vector<long long> kmax;  // floor(n)
};

template <typename T>
FqParams<T> fq_params(const T* d, const T* qm, int slices) {
  FqParams<T> p;
  p.n.resize(std::size_t(slices));
  p.kmax.resize(std::size_t(slices));
  for (int s = 0; s < slices; ++s) {
    p.n[std::size_t(s)] = qm[s] / d[s];
    p.kmax[std::size_t(s)] = (long long)(std::floor(double(p.n[std::size_t(s)])));
  }
  return p;
}

}  // namespace detail

// Pure fake-quantize on raw values (no tape); d/qm length = slice count.
template <typename T>
Tensor<T> fake_quantize_value(const Tensor<T>& x, const QuantizerState& q,
                              const T* d, const T* qm) {
  detail::check_positive_params(q.name, d, qm, q.slices);
  detail::SliceMap map(q, x.shape, x.size());
  auto p = detail::fq_params(d, qm, map.slices);
  const bool sgn = q.signedness == Signedness::signed_sym;
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int s = map.slice_of(i);
    out[i] = detail::fq_element(x[i], d[s], p.n[std::size_t(s)], sgn,
                                p.kmax[std::size_t(s)]);
  }
  return out;
}

// Convenience overload reading the state's own (possibly frozen) parameters.
template <typename T>
Tensor<T> fake_quantize_value(const Tensor<T>& x, const QuantizerState& q) {
  std::vector<T> d(std::size_t(q.slices)), qm(std::size_t(q.slices));
  for (int s = 0; s < q.slices; ++s) {
    d[std::size_t(s)] = T(q.step(s));
    qm[std::size_t(s)] = T(q.range(s));
  }
  return fake_quantize_value(x, q, d.data(), qm.data());
}

namespace detail {

// Shared backward: input gradient through the scaling rule (saturated
// elements pass unscaled), step/range gradients through the clip-aware
// straight-through treatment. gd/gq may be null (frozen parameters).
template <typename T>
void fq_backward(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gx,
                 const T* d, const FqParams<T>& p, const SliceMap& map,
                 bool is_signed, const GradScaleRule& rule,
                 std::uint64_t noise_key, T* gd, T* gq) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int s = map.slice_of(i);
    const T ds = d[s];
    const T n = p.n[std::size_t(s)];
    const T lo = is_signed ? -n : T(0);
    const T z = x[i] / ds;
    const T g = gout[i];
    if (z > n) {
      gx[i] += g;
      if (gq) gq[s] += g;
    } else if (z < lo) {
      gx[i] += g;
      if (gq && is_signed) gq[s] -= g;
    } else {
      const T r = z - round_away(z);
      const double noise = noise_draw(rule.kind, noise_key, i);
      const double f = scale_factor(double(r), sign_of(g), rule, noise);
      gx[i] += T(double(g) * f);
      if (gd) gd[s] += g * (-r);
    }
  }
}

}  // namespace detail

// Trainable fake-quantize: d_node and q_node are per-slice tensors (exp of
// the log-space leaves). Backward scales the input gradient by the selected
// rule and routes clip-aware gradients into d and q_max.
template <typename T>
NodePtr<T> fake_quantize(Tape<T>& t, NodePtr<T> x, NodePtr<T> d_node,
                         NodePtr<T> q_node, const QuantizerState& q,
                         const GradScaleRule& rule, std::uint64_t noise_key = 0) {
  rule.validate();
  require(int(d_node->value.size()) == q.slices &&
              int(q_node->value.size()) == q.slices,
          "quantizer " + q.name + ": parameter node length vs slice count");
  detail::check_positive_params(q.name, d_node->value.data.data(),
                                q_node->value.data.data(), q.slices);
  detail::SliceMap map(q, x->value.shape, x->value.size());
  auto p = detail::fq_params(d_node->value.data.data(),
                             q_node->value.data.data(), q.slices);
  const bool sgn = q.signedness == Signedness::signed_sym;

  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int s = map.slice_of(i);
    out[i] = detail::fq_element(x->value[i], d_node->value[std::size_t(s)],
                                p.n[std::size_t(s)], sgn, p.kmax[std::size_t(s)]);
  }
  auto* node = t.alloc(std::move(out), "fake_quantize");
  node->backward = [node, x, d_node, q_node, p = std::move(p), map, sgn, rule,
                    noise_key] {
    detail::fq_backward(x->value, node->grad, x->grad,
                        d_node->value.data.data(), p, map, sgn, rule, noise_key,
                        d_node->grad.data.data(), q_node->grad.data.data());
  };
  return node;
}

// Frozen fake-quantize: fixed per-slice parameters, no range gradients; the
// input gradient still flows through the selected rule.
template <typename T>
NodePtr<T> fake_quantize_frozen(Tape<T>& t, NodePtr<T> x,
                                const QuantizerState& q,
                                const GradScaleRule& rule,
                                std::uint64_t noise_key = 0) {
  rule.validate();
  require(q.frozen, "quantizer " + q.name + ": not frozen");
  auto d = std::make_shared<std::vector<T>>(q.frozen_d.begin(), q.frozen_d.end());
  auto qm = std::make_shared<std::vector<T>>(q.frozen_q.begin(), q.frozen_q.end());
  detail::check_positive_params(q.name, d->data(), qm->data(), q.slices);
  detail::SliceMap map(q, x->value.shape, x->value.size());
  auto p = detail::fq_params(d->data(), qm->data(), q.slices);
  const bool sgn = q.signedness == Signedness::signed_sym;

  Tensor<T> out(x->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int s = map.slice_of(i);
    out[i] = detail::fq_element(x->value[i], (*d)[std::size_t(s)],
                                p.n[std::size_t(s)], sgn, p.kmax[std::size_t(s)]);
  }
  auto* node = t.alloc(std::move(out), "fake_quantize_frozen");
  node->backward = [node, x, d, p = std::move(p), map, sgn, rule, noise_key] {
    detail::fq_backward(x->value, node->grad, x->grad, d->data(), p, map, sgn,
                        rule, noise_key, static_cast<T*>(nullptr),
                        static_cast<T*>(nullptr));
  };
  return node;
}

}  // namespace mixquant
