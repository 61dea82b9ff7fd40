#pragma once

// Byte-level memory footprint of a quantized model: per-tensor weight bytes,
// per-layer activation bytes, batch-norm affine parameters at 2 bytes each,
// and biases either quantized at the owning layer's weight widths or held at
// 2 bytes. Byte rounding is a per-tensor / per-layer ceiling.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"
#include "reference_models.hpp"

namespace mixquant {

enum class BiasPolicy { quantized_bias, bfloat16_bias };

inline BiasPolicy parse_bias_policy(const std::string& s) {
  if (s == "quant" || s == "quantized_bias") return BiasPolicy::quantized_bias;
  if (s == "bf16" || s == "bfloat16_bias") return BiasPolicy::bfloat16_bias;
  fail("bias policy: unknown '" + s + "'");
}

inline std::string bias_policy_name(BiasPolicy p) {
  return p == BiasPolicy::quantized_bias ? "quantized_bias" : "bfloat16_bias";
}

struct LayerFootprint {
  std::string name;
  std::uint64_t weight_bytes = 0;
  std::uint64_t act_bytes = 0;
  std::uint64_t bn_bytes = 0;
  std::uint64_t bias_bytes = 0;
};

struct FootprintReport {
  std::uint64_t weight_bytes = 0;
  std::uint64_t activation_bytes = 0;
  std::uint64_t bn_bytes = 0;
  std::uint64_t bias_bytes = 0;
  std::uint64_t total_bytes = 0;
  std::vector<LayerFootprint> layers;

  void add(LayerFootprint row) {
    weight_bytes += row.weight_bytes;
    activation_bytes += row.act_bytes;
    bn_bytes += row.bn_bytes;
    bias_bytes += row.bias_bytes;
    layers.push_back(std::move(row));
  }
  void finish() {
    total_bytes = weight_bytes + activation_bytes + bn_bytes + bias_bytes;
  }
};

namespace detail_size {

inline std::uint64_t frozen_weight_bytes(const QuantizerState& q,
                                         std::int64_t elems) {
  require(q.frozen, "footprint: quantizer " + q.name + " not frozen");
  const std::int64_t per = elems / q.slices;
  std::uint64_t bits = 0;
  for (int s = 0; s < q.slices; ++s)
    bits += std::uint64_t(q.frozen_bits[std::size_t(s)]) * std::uint64_t(per);
  return ceil_div_u64(bits, 8);
}

inline std::uint64_t frozen_act_bytes(const QuantizerState& q,
                                      std::int64_t elems) {
  require(q.frozen, "footprint: quantizer " + q.name + " not frozen");
  return ceil_div_u64(std::uint64_t(q.frozen_bits[0]) * std::uint64_t(elems),
                      8);
}

}  // namespace detail_size

inline FootprintReport footprint(const Model& m, BiasPolicy policy) {
  require(m.all_frozen(),
          "footprint: continuous bit-widths have no byte meaning; freeze "
          "the model first");
  FootprintReport rep;

  rep.add({"input", 0,
           detail_size::frozen_act_bytes(m.quants[std::size_t(m.input_q)],
                                         m.q_elems[std::size_t(m.input_q)]),
           0, 0});
  for (const auto* u : m.conv_units()) {
    LayerFootprint row;
    row.name = u->name;
    row.weight_bytes = detail_size::frozen_weight_bytes(
        m.quants[std::size_t(u->wq)], m.q_elems[std::size_t(u->wq)]);
    if (u->aq >= 0)
      row.act_bytes = detail_size::frozen_act_bytes(
          m.quants[std::size_t(u->aq)], m.q_elems[std::size_t(u->aq)]);
    row.bn_bytes = 2ull * 2ull * std::uint64_t(u->out_c);
    rep.add(std::move(row));
  }
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const int qi = m.blocks[b].aq_out;
    rep.add({"block" + std::to_string(b) + ".out", 0,
             detail_size::frozen_act_bytes(m.quants[std::size_t(qi)],
                                           m.q_elems[std::size_t(qi)]),
             0, 0});
  }
  rep.add({"gap", 0,
           detail_size::frozen_act_bytes(m.quants[std::size_t(m.gap_q)],
                                         m.q_elems[std::size_t(m.gap_q)]),
           0, 0});

  LayerFootprint head;
  head.name = "head";
  const auto& hq = m.quants[std::size_t(m.head_wq)];
  head.weight_bytes =
      detail_size::frozen_weight_bytes(hq, m.q_elems[std::size_t(m.head_wq)]);
  const std::uint64_t bias_count = m.params[std::size_t(m.head_b)].value.size();
  if (policy == BiasPolicy::bfloat16_bias) {
    head.bias_bytes = 2 * bias_count;
  } else {
    std::uint64_t bits = 0;
    for (int s = 0; s < hq.slices; ++s)
      bits += std::uint64_t(hq.frozen_bits[std::size_t(s)]);
    require(std::uint64_t(hq.slices) == bias_count,
            "footprint: bias count vs head slices");
    head.bias_bytes = ceil_div_u64(bits, 8);
  }
  rep.add(std::move(head));
  rep.finish();
  return rep;
}

struct Exemptions {
  bool first_last_bfloat16 = false;
};

// Comparison-convention footprint: first/last weight tensors (and the last
// layer's bias and input activation) held at 2 bytes per element.
inline FootprintReport exemption_footprint(
    const Model& m, const Exemptions& ex,
    BiasPolicy policy = BiasPolicy::quantized_bias) {
  FootprintReport rep = footprint(m, policy);
  if (!ex.first_last_bfloat16) return rep;
  for (auto& row : rep.layers) {
    if (row.name == m.stem.name) {
      row.weight_bytes =
          2ull * std::uint64_t(m.q_elems[std::size_t(m.stem.wq)]);
    } else if (row.name == "head") {
      row.weight_bytes =
          2ull * std::uint64_t(m.q_elems[std::size_t(m.head_wq)]);
      row.bias_bytes =
          2ull * std::uint64_t(m.params[std::size_t(m.head_b)].value.size());
    } else if (row.name == "gap") {
      row.act_bytes = 2ull * std::uint64_t(m.q_elems[std::size_t(m.gap_q)]);
    }
  }
  FootprintReport out;
  for (auto& row : rep.layers) out.add(row);
  out.finish();
  return out;
}

// Homogeneous footprint of a shape-only reference graph.
struct ReferenceFootprint {
  std::uint64_t mvm_weight_bytes = 0;
  std::uint64_t bn_bytes = 0;
  std::uint64_t act_bytes = 0;
  std::uint64_t total_bytes = 0;
};

inline ReferenceFootprint reference_homogeneous_footprint(
    const ReferenceGraph& g, int weight_bits, int act_bits) {
  require(weight_bits >= 1 && act_bits >= 1, "reference footprint: bits >= 1");
  ReferenceFootprint f;
  for (const auto& w : g.weights)
    f.mvm_weight_bytes += ceil_div_u64(
        std::uint64_t(weight_bits) * (w.weight_elems + w.bias_elems), 8);
  f.bn_bytes = 2 * g.bn_params;
  for (const auto& a : g.acts)
    f.act_bytes += ceil_div_u64(std::uint64_t(act_bits) * a.elems, 8);
  f.total_bytes = f.mvm_weight_bytes + f.bn_bytes + f.act_bytes;
  return f;
}

// ---- Per-layer bit allocation report --------------------------------------

struct BitAllocationRow {
  std::string layer;
  bool has_weight = false, has_act = false;
  double w_bits_min = 0.0, w_bits_mean = 0.0, w_bits_max = 0.0;
  double act_bits = 0.0;
  std::uint64_t weight_bytes = 0, act_bytes = 0;
};

namespace detail_size {

inline std::uint64_t live_bytes(const QuantizerState& q, std::int64_t elems) {
  const std::int64_t per = elems / q.slices;
  double bits = 0.0;
  for (int s = 0; s < q.slices; ++s)
    bits += q.effective_bits(s) * double(per);
  return std::uint64_t(std::ceil(bits / 8.0));
}

inline void fill_weight(BitAllocationRow& row, const QuantizerState& q,
                        std::int64_t elems) {
  row.has_weight = true;
  double lo = q.effective_bits(0), hi = lo, acc = 0.0;
  for (int s = 0; s < q.slices; ++s) {
    const double b = q.effective_bits(s);
    lo = std::min(lo, b);
    hi = std::max(hi, b);
    acc += b;
  }
  row.w_bits_min = lo;
  row.w_bits_max = hi;
  row.w_bits_mean = acc / double(q.slices);
  row.weight_bytes = live_bytes(q, elems);
}

inline void fill_act(BitAllocationRow& row, const QuantizerState& q,
                     std::int64_t elems) {
  row.has_act = true;
  row.act_bits = q.effective_bits(0);
  row.act_bytes = live_bytes(q, elems);
}

}  // namespace detail_size

// Works on live (continuous bits) and frozen models alike; frozen byte
// figures agree with footprint()'s weight/activation fields.
inline std::vector<BitAllocationRow> bit_allocation_report(const Model& m) {
  std::vector<BitAllocationRow> rows;
  auto act_row = [&](const std::string& name, int qi) {
    BitAllocationRow row;
    row.layer = name;
    detail_size::fill_act(row, m.quants[std::size_t(qi)],
                          m.q_elems[std::size_t(qi)]);
    rows.push_back(std::move(row));
  };
  act_row("input", m.input_q);
  for (const auto* u : m.conv_units()) {
    BitAllocationRow row;
    row.layer = u->name;
    detail_size::fill_weight(row, m.quants[std::size_t(u->wq)],
                             m.q_elems[std::size_t(u->wq)]);
    if (u->aq >= 0)
      detail_size::fill_act(row, m.quants[std::size_t(u->aq)],
                            m.q_elems[std::size_t(u->aq)]);
    rows.push_back(std::move(row));
  }
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    act_row("block" + std::to_string(b) + ".out", m.blocks[b].aq_out);
  act_row("gap", m.gap_q);
  BitAllocationRow head;
  head.layer = "head";
  detail_size::fill_weight(head, m.quants[std::size_t(m.head_wq)],
                           m.q_elems[std::size_t(m.head_wq)]);
  rows.push_back(std::move(head));
  return rows;
}

}  // namespace mixquant
