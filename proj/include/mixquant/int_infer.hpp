#pragma once

// Integer inference on a frozen model. Every matrix-vector product runs on
// int32 codes with an int32 accumulator; batch norm, ReLU6, residual adds
// and pooling run in float between the integer MVMs, and activations are
// re-quantized to codes at every activation-quantizer site with the same
// round-half-away-from-zero rule the trainer uses. Codes are exact integers,
// so when the width check passes the integer pipeline reproduces the frozen
// fake-quant pipeline up to float rounding in the inter-MVM glue.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "model.hpp"
#include "size_accountant.hpp"

namespace mixquant {

// ---- Accumulator width check ------------------------------------------------

// |code_in| <= 2^b_in and |code_w| <= 2^b_w, so an MVM over `fanin` taps is
// bounded by fanin * 2^(b_in + b_w). Requiring
//   b_in + max_slice(b_w) + ceil(log2(fanin)) <= 31
// keeps every int32 accumulator away from overflow.
struct AccumWidthRow {
  std::string layer;
  int b_in = 0, b_w = 0;
  int fanin_bits = 0;
  int total = 0;
};

namespace detail_int {

inline int ceil_log2(std::int64_t n) {
  int b = 0;
  while ((std::int64_t(1) << b) < n) ++b;
  return b;
}

inline int frozen_act_bits(const Model& m, int qi) {
  const auto& q = m.quants[std::size_t(qi)];
  require(q.frozen, "integer inference: quantizer " + q.name + " not frozen");
  return q.frozen_bits[0];
}

inline int frozen_weight_bits_max(const Model& m, int qi) {
  const auto& q = m.quants[std::size_t(qi)];
  require(q.frozen, "integer inference: quantizer " + q.name + " not frozen");
  int b = 1;
  for (int v : q.frozen_bits) b = std::max(b, v);
  return b;
}

}  // namespace detail_int

inline std::vector<AccumWidthRow> accumulator_width_report(const Model& m) {
  require(m.all_frozen(), "integer inference requires a frozen model");
  std::vector<AccumWidthRow> rows;
  // Activation-quantizer index feeding each unit, in forward order.
  int feed = m.input_q;
  auto push = [&](const std::string& name, int in_q, int w_q,
                  std::int64_t fanin) {
    AccumWidthRow r;
    r.layer = name;
    r.b_in = detail_int::frozen_act_bits(m, in_q);
    r.b_w = detail_int::frozen_weight_bits_max(m, w_q);
    r.fanin_bits = detail_int::ceil_log2(fanin);
    r.total = r.b_in + r.b_w + r.fanin_bits;
    rows.push_back(r);
  };
  auto unit_fanin = [](const ConvUnit& u) {
    return std::int64_t(u.in_c / u.groups) * u.k * u.k;
  };
  push(m.stem.name, feed, m.stem.wq, unit_fanin(m.stem));
  feed = m.stem.aq;
  for (const auto& b : m.blocks) {
    push(b.expand.name, feed, b.expand.wq, unit_fanin(b.expand));
    push(b.dw.name, b.expand.aq, b.dw.wq, unit_fanin(b.dw));
    push(b.project.name, b.dw.aq, b.project.wq, unit_fanin(b.project));
    feed = b.aq_out;
  }
  push("head", m.gap_q, m.head_wq,
       std::int64_t(m.params[std::size_t(m.head_w)].value.dim(1)));
  return rows;
}

// Fails (naming the first offending layer) unless every MVM accumulator fits.
inline void check_accumulator_widths(const Model& m) {
  for (const auto& r : accumulator_width_report(m))
    require(r.total <= 31,
            "integer inference: layer " + r.layer +
                " needs " + std::to_string(r.total) +
                " accumulator bits (input " + std::to_string(r.b_in) +
                " + weight " + std::to_string(r.b_w) + " + fan-in " +
                std::to_string(r.fanin_bits) + "); the int32 limit is 31");
}

// ---- Code tensors -----------------------------------------------------------

struct IntTensor {
  std::vector<int> shape;  // NCHW or NC
  std::vector<std::int32_t> codes;
  double d = 0.0;  // dequantized value = code * d
  int bits = 0;    // frozen width of the producing quantizer
};

// Quantize float values to integer codes on a frozen per-tensor grid:
// code = clamp(round-half-away(x / d), lo, 2^b) with lo = -2^b (signed) or 0.
// Delegates to the trainer's element kernel so both pipelines always pick
// the same code for the same float input.
inline IntTensor quantize_to_codes(const Tensor<float>& x,
                                   const QuantizerState& q) {
  require(q.frozen, "quantize_to_codes: quantizer " + q.name + " not frozen");
  require(q.slices == 1,
          "quantize_to_codes: activation quantizer " + q.name +
              " must be per-tensor");
  IntTensor out;
  out.shape = x.shape;
  out.d = double(q.frozen_d[0]);
  out.bits = q.frozen_bits[0];
  const float d = q.frozen_d[0];
  const float n = q.frozen_q[0] / d;
  const long long kmax = (long long)(std::floor(double(n)));
  const bool sgn = q.signedness == Signedness::signed_sym;
  out.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    long long code = 0;
    detail::fq_element(x.data[i], d, n, sgn, kmax, &code);
    out.codes[i] = std::int32_t(code);
  }
  return out;
}

struct IntWeights {
  std::vector<int> shape;
  std::vector<std::int32_t> codes;
  std::vector<double> d;  // per output-channel (slice) scale
};

// Slice s covers the contiguous run of `elems/slices` values along the
// leading axis, matching the trainer's per-channel layout.
inline IntWeights weight_codes(const Tensor<float>& w,
                               const QuantizerState& q) {
  require(q.frozen, "weight_codes: quantizer " + q.name + " not frozen");
  require(w.size() % std::size_t(q.slices) == 0,
          "weight_codes: " + q.name + " slice layout mismatch");
  IntWeights out;
  out.shape = w.shape;
  out.codes.resize(w.size());
  out.d.resize(std::size_t(q.slices));
  const std::size_t per = w.size() / std::size_t(q.slices);
  for (int s = 0; s < q.slices; ++s) {
    const float d = q.frozen_d[std::size_t(s)];
    const float n = q.frozen_q[std::size_t(s)] / d;
    const long long kmax = (long long)(std::floor(double(n)));
    out.d[std::size_t(s)] = double(d);
    for (std::size_t i = std::size_t(s) * per; i < (std::size_t(s) + 1) * per;
         ++i) {
      long long code = 0;
      detail::fq_element(w.data[i], d, n, /*is_signed=*/true, kmax, &code);
      out.codes[i] = std::int32_t(code);
    }
  }
  return out;
}

// ---- Integer MVMs with float glue -------------------------------------------

namespace detail_int {

// Integer convolution; returns the float dequantized output
// acc * (d_in * d_w[channel]).
inline Tensor<float> int_conv(const IntTensor& x, const IntWeights& w,
                              const ConvUnit& u) {
  const int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int O = w.shape[0], Ik = w.shape[1], Kh = w.shape[2], Kw = w.shape[3];
  require(Ci == u.in_c && O == u.out_c && Ik == Ci / u.groups,
          "int conv: geometry mismatch at " + u.name);
  const int Ho = (H + 2 * u.pad - Kh) / u.stride + 1;
  const int Wo = (W + 2 * u.pad - Kw) / u.stride + 1;
  const int Og = O / u.groups;
  Tensor<float> y({N, O, Ho, Wo});
  const std::int32_t* xc = x.codes.data();
  const std::int32_t* wc = w.codes.data();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      const int g = o / Og, c0 = g * Ik;
      const double scale = x.d * w.d[std::size_t(o)];
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          std::int32_t acc = 0;
          for (int i = 0; i < Ik; ++i)
            for (int kh = 0; kh < Kh; ++kh) {
              const int ih = oh * u.stride - u.pad + kh;
              if (ih < 0 || ih >= H) continue;
              const std::size_t xrow =
                  ((std::size_t(n) * Ci + std::size_t(c0 + i)) * H + ih) * W;
              const std::size_t wrow =
                  ((std::size_t(o) * Ik + std::size_t(i)) * Kh + kh) * Kw;
              for (int kw = 0; kw < Kw; ++kw) {
                const int iw = ow * u.stride - u.pad + kw;
                if (iw < 0 || iw >= W) continue;
                acc += xc[xrow + std::size_t(iw)] * wc[wrow + std::size_t(kw)];
              }
            }
          y.data[((std::size_t(n) * O + std::size_t(o)) * Ho +
                  std::size_t(oh)) *
                     Wo +
                 std::size_t(ow)] = float(double(acc) * scale);
        }
    }
  return y;
}

// Same float arithmetic, in the same order, as the trainer's eval-mode
// batch norm and ReLU6, so the two pipelines diverge only through the MVMs.
inline void bn_relu_inplace(Tensor<float>& y, const Model& m,
                            const ConvUnit& u) {
  const int N = y.shape[0], C = y.shape[1];
  const std::size_t plane = std::size_t(y.shape[2]) * std::size_t(y.shape[3]);
  const float* gamma = m.params[std::size_t(u.gamma)].value.data.data();
  const float* beta = m.params[std::size_t(u.beta)].value.data.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float inv =
          1.0f / std::sqrt(u.bn_var[std::size_t(c)] + kBnEps);
      const float mu = u.bn_mean[std::size_t(c)];
      const float g = gamma[c], b = beta[c];
      float* p = y.data.data() + (std::size_t(n) * C + std::size_t(c)) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        float v = g * (p[i] - mu) * inv + b;
        if (u.relu) v = v < 0.0f ? 0.0f : (v > 6.0f ? 6.0f : v);
        p[i] = v;
      }
    }
}

// code * d in float, matching the fake-quant kernel's reconstruction.
inline Tensor<float> dequant(const IntTensor& x) {
  Tensor<float> out(x.shape);
  const float d = float(x.d);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = float(x.codes[i]) * d;
  return out;
}

// Round a float to bfloat16 precision (round-to-nearest-even on the top 16
// mantissa bits), returned as float.
inline float bf16_round(float v) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits = (bits + 0x7FFFu + lsb) & 0xFFFF0000u;
  float out;
  std::memcpy(&out, &bits, sizeof(out));
  return out;
}

}  // namespace detail_int

// ---- Whole-model integer forward ---------------------------------------------

struct IntForward {
  Tensor<float> logits;
  // Codes observed at every activation-quantizer site (aligned with
  // m.quants; empty vectors at weight-quantizer indices).
  std::vector<IntTensor> act_codes;
};

inline IntForward int_model_forward(const Model& m, const Tensor<float>& x,
                                    BiasPolicy bias_policy,
                                    bool keep_codes = false) {
  require(m.all_frozen(), "integer inference requires a frozen model");
  require(x.rank() == 4, "integer inference: input must be NCHW");
  IntForward out;
  if (keep_codes) out.act_codes.resize(m.quants.size());

  auto requant = [&](const Tensor<float>& v, int qi) {
    IntTensor c = quantize_to_codes(v, m.quants[std::size_t(qi)]);
    if (keep_codes) out.act_codes[std::size_t(qi)] = c;
    return c;
  };
  auto run_unit = [&](const IntTensor& in, const ConvUnit& u) {
    IntWeights wc =
        weight_codes(m.params[std::size_t(u.w)].value,
                     m.quants[std::size_t(u.wq)]);
    Tensor<float> y = detail_int::int_conv(in, wc, u);
    detail_int::bn_relu_inplace(y, m, u);
    return y;
  };

  IntTensor cur = requant(x, m.input_q);
  Tensor<float> stem_f = run_unit(cur, m.stem);
  cur = requant(stem_f, m.stem.aq);
  for (const auto& blk : m.blocks) {
    IntTensor block_in = cur;
    Tensor<float> y = run_unit(block_in, blk.expand);
    IntTensor c1 = requant(y, blk.expand.aq);
    y = run_unit(c1, blk.dw);
    IntTensor c2 = requant(y, blk.dw.aq);
    y = run_unit(c2, blk.project);
    if (blk.residual) {
      Tensor<float> res = detail_int::dequant(block_in);
      require(res.size() == y.size(), "int residual: shape mismatch");
      for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += res.data[i];
    }
    cur = requant(y, blk.aq_out);
  }

  // Global average pool in float on the dequantized block output.
  Tensor<float> feat = detail_int::dequant(cur);
  const int N = feat.shape[0], C = feat.shape[1];
  const std::size_t plane =
      std::size_t(feat.shape[2]) * std::size_t(feat.shape[3]);
  Tensor<float> pooled({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float acc = 0.0f;
      const float* p =
          feat.data.data() + (std::size_t(n) * C + std::size_t(c)) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      pooled.data[std::size_t(n) * C + std::size_t(c)] =
          acc / float(plane);
    }
  IntTensor gap = requant(pooled, m.gap_q);

  // Integer head: codes (N,C) x weight codes (K,C) + bias per policy.
  const Tensor<float>& hw = m.params[std::size_t(m.head_w)].value;
  const Tensor<float>& hb = m.params[std::size_t(m.head_b)].value;
  IntWeights wk = weight_codes(hw, m.quants[std::size_t(m.head_wq)]);
  const int K = hw.dim(0), Cf = hw.dim(1);
  out.logits = Tensor<float>({N, K});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      std::int32_t acc = 0;
      const std::int32_t* xr = gap.codes.data() + std::size_t(n) * Cf;
      const std::int32_t* wr = wk.codes.data() + std::size_t(k) * Cf;
      for (int c = 0; c < Cf; ++c) acc += xr[c] * wr[c];
      const double scale = gap.d * wk.d[std::size_t(k)];
      double v;
      if (bias_policy == BiasPolicy::quantized_bias) {
        const std::int32_t bc = std::int32_t(
            std::llround(round_away(double(hb.data[std::size_t(k)]) / scale)));
        v = double(acc + bc) * scale;
      } else {
        v = double(acc) * scale +
            double(detail_int::bf16_round(hb.data[std::size_t(k)]));
      }
      out.logits.data[std::size_t(n) * K + std::size_t(k)] = float(v);
    }
  return out;
}

// Top-1 accuracy of the integer pipeline over a dataset.
inline double int_model_accuracy(const Model& m, const Dataset& ds,
                                 BiasPolicy bias_policy, int batch_size = 64) {
  require(ds.count() > 0, "integer inference: empty dataset");
  check_accumulator_widths(m);
  long long correct = 0;
  for (std::size_t lo = 0; lo < ds.count(); lo += std::size_t(batch_size)) {
    const std::size_t hi =
        std::min(ds.count(), lo + std::size_t(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    Batch b = make_batch(ds, idx, false, 0);
    IntForward f = int_model_forward(m, b.x, bias_policy);
    const int K = f.logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* row = f.logits.data.data() + r * std::size_t(K);
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      if (best == int(b.labels[r])) ++correct;
    }
  }
  return double(correct) / double(ds.count());
}

// ---- Fake-quant vs integer agreement -----------------------------------------

struct PipelineAgreement {
  long long samples = 0;
  long long argmax_agree = 0;
  double argmax_agree_frac = 0.0;
  double fq_top1 = 0.0;
  double int_top1 = 0.0;
  // Per activation site: fraction of elements whose codes differ by <= 1.
  std::vector<std::string> site_names;
  std::vector<double> site_within_one;
  double min_within_one = 1.0;
};

// Runs both pipelines over the dataset and measures argmax agreement plus
// element-wise code agreement (within one step) at every activation site.
inline PipelineAgreement compare_pipelines(Model& m, const Dataset& ds,
                                           BiasPolicy bias_policy,
                                           int batch_size = 64) {
  require(m.all_frozen(), "pipeline comparison requires a frozen model");
  check_accumulator_widths(m);
  PipelineAgreement out;
  std::vector<long long> within(m.quants.size(), 0);
  std::vector<long long> total(m.quants.size(), 0);
  long long fq_correct = 0, int_correct = 0;

  for (std::size_t lo = 0; lo < ds.count(); lo += std::size_t(batch_size)) {
    const std::size_t hi =
        std::min(ds.count(), lo + std::size_t(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    Batch b = make_batch(ds, idx, false, 0);

    std::vector<Tensor<float>> post(m.quants.size());
    Tape<float> tape;
    ForwardOpts fo;
    fo.training = false;
    fo.quantize = true;
    fo.record_post = &post;
    ForwardGraph g = forward(tape, m, b.x, fo);

    IntForward intf = int_model_forward(m, b.x, bias_policy, true);

    for (std::size_t qi = 0; qi < m.quants.size(); ++qi) {
      if (m.q_is_weight[qi] || post[qi].size() == 0) continue;
      const IntTensor& ic = intf.act_codes[qi];
      require(ic.codes.size() == post[qi].size(),
              "pipeline comparison: site size mismatch at " +
                  m.quants[qi].name);
      const double d = double(m.quants[qi].frozen_d[0]);
      for (std::size_t i = 0; i < post[qi].size(); ++i) {
        const long long cf = std::llround(double(post[qi].data[i]) / d);
        if (std::llabs(cf - (long long)(ic.codes[i])) <= 1) ++within[qi];
        ++total[qi];
      }
    }

    const int K = g.logits->value.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* fr = g.logits->value.data.data() + r * std::size_t(K);
      const float* ir = intf.logits.data.data() + r * std::size_t(K);
      int bf = 0, bi = 0;
      for (int k = 1; k < K; ++k) {
        if (fr[k] > fr[bf]) bf = k;
        if (ir[k] > ir[bi]) bi = k;
      }
      if (bf == bi) ++out.argmax_agree;
      if (bf == int(b.labels[r])) ++fq_correct;
      if (bi == int(b.labels[r])) ++int_correct;
      ++out.samples;
    }
  }

  for (std::size_t qi = 0; qi < m.quants.size(); ++qi) {
    if (total[qi] == 0) continue;
    const double frac = double(within[qi]) / double(total[qi]);
    out.site_names.push_back(m.quants[qi].name);
    out.site_within_one.push_back(frac);
    out.min_within_one = std::min(out.min_within_one, frac);
  }
  out.argmax_agree_frac = double(out.argmax_agree) / double(out.samples);
  out.fq_top1 = double(fq_correct) / double(out.samples);
  out.int_top1 = double(int_correct) / double(out.samples);
  return out;
}

}  // namespace mixquant
