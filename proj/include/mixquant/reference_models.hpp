#pragma once

// Shape-only reference graphs for five architectures. Parameter and
// activation counts are derived purely from layer geometry and partitioned
// into total / MVM / first-layer / last-layer / batch-norm / summed-activation
// / last-activation categories. Each architecture carries its own convention
// for which activation tensors join the sum (inputs vs outputs, pooled head,
// squeeze-excite products); the conventions are pinned by the verification
// table below.

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"

namespace mixquant {

enum class RefRole { first, last, inner };

struct RefWeight {
  std::string name;
  std::uint64_t weight_elems = 0;
  std::uint64_t bias_elems = 0;
  RefRole role = RefRole::inner;
};

struct RefAct {
  std::string name;
  std::uint64_t elems = 0;
};

struct ReferenceGraph {
  std::string arch;
  int resolution = 224;
  std::vector<RefWeight> weights;
  std::vector<RefAct> acts;
  std::uint64_t bn_params = 0;  // gamma + beta over every normalized feature
  std::uint64_t last_act = 0;   // elements entering the final classifier

  std::uint64_t weight_param_total() const {
    std::uint64_t s = 0;
    for (const auto& w : weights) s += w.weight_elems + w.bias_elems;
    return s;
  }
  std::uint64_t total_params() const { return weight_param_total() + bn_params; }
  std::uint64_t mvm_params() const { return total_params() - bn_params; }
  std::uint64_t role_params(RefRole r) const {
    std::uint64_t s = 0;
    for (const auto& w : weights)
      if (w.role == r) s += w.weight_elems + w.bias_elems;
    return s;
  }
  std::uint64_t first_params() const { return role_params(RefRole::first); }
  std::uint64_t last_params() const { return role_params(RefRole::last); }
  std::uint64_t act_sum() const {
    std::uint64_t s = 0;
    for (const auto& a : acts) s += a.elems;
    return s;
  }
};

namespace detail_ref {

// Which tensor of a conv joins the activation sum.
enum class ActCount { none, input, output, output_pooled };

struct Walker {
  ReferenceGraph g;
  int h = 0;  // current square spatial extent
  int c = 0;  // current channels

  static int out_extent(int h, int k, int stride, int pad) {
    const int o = (h + 2 * pad - k) / stride + 1;
    require(o > 0, "reference graph: non-positive spatial extent");
    return o;
  }

  void conv(const std::string& name, int out_c, int k, int stride, int pad,
            int groups, bool bias, bool bn, RefRole role, ActCount mode) {
    const int ho = out_extent(h, k, stride, pad);
    const std::uint64_t w_elems = std::uint64_t(out_c) *
                                  std::uint64_t(c / groups) * std::uint64_t(k) *
                                  std::uint64_t(k);
    g.weights.push_back(
        {name, w_elems, bias ? std::uint64_t(out_c) : 0, role});
    if (bn) g.bn_params += 2 * std::uint64_t(out_c);
    if (mode == ActCount::input)
      g.acts.push_back({name + ".in", std::uint64_t(c) * std::uint64_t(h) *
                                          std::uint64_t(h)});
    else if (mode == ActCount::output)
      g.acts.push_back({name + ".out", std::uint64_t(out_c) *
                                           std::uint64_t(ho) *
                                           std::uint64_t(ho)});
    else if (mode == ActCount::output_pooled)
      g.acts.push_back({name + ".out_pooled", std::uint64_t(out_c)});
    h = ho;
    c = out_c;
  }

  void pool(int k, int stride, int pad) { h = out_extent(h, k, stride, pad); }

  void global_pool() { h = 1; }

  void fc(const std::string& name, int out_f, bool bias, bool count_input,
          RefRole role = RefRole::last) {
    g.weights.push_back({name, std::uint64_t(out_f) * std::uint64_t(c),
                         bias ? std::uint64_t(out_f) : 0, role});
    if (count_input) g.acts.push_back({name + ".in", std::uint64_t(c)});
    g.last_act = std::uint64_t(c);
    c = out_f;
  }
};

inline ReferenceGraph build_resnet18(int res) {
  Walker w;
  w.g.arch = "resnet18";
  w.g.resolution = res;
  w.h = res;
  w.c = 3;
  // Convention: every conv input joins the sum except the stem's; the
  // classifier input joins as well.
  w.conv("conv1", 64, 7, 2, 3, 1, false, true, RefRole::first, ActCount::none);
  w.pool(3, 2, 1);
  const int widths[4] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    const int width = widths[stage];
    for (int block = 0; block < 2; ++block) {
      const bool down = stage > 0 && block == 0;
      const int stride = down ? 2 : 1;
      const std::string base =
          "layer" + std::to_string(stage + 1) + "." + std::to_string(block);
      const int in_h = w.h;
      const int in_c = w.c;
      w.conv(base + ".conv1", width, 3, stride, 1, 1, false, true,
             RefRole::inner, ActCount::input);
      w.conv(base + ".conv2", width, 3, 1, 1, 1, false, true, RefRole::inner,
             ActCount::input);
      if (down) {
        Walker side;
        side.g.arch = w.g.arch;
        side.h = in_h;
        side.c = in_c;
        side.conv(base + ".downsample", width, 1, 2, 0, 1, false, true,
                  RefRole::inner, ActCount::input);
        for (auto& t : side.g.weights) w.g.weights.push_back(t);
        for (auto& a : side.g.acts) w.g.acts.push_back(a);
        w.g.bn_params += side.g.bn_params;
      }
    }
  }
  w.global_pool();
  w.fc("fc", 1000, true, true);
  return w.g;
}

inline ReferenceGraph build_mobilenetv2(int res) {
  Walker w;
  w.g.arch = "mobilenetv2";
  w.g.resolution = res;
  w.h = res;
  w.c = 3;
  // Convention: every conv output joins the sum (head at full spatial size);
  // the classifier input does not.
  w.conv("stem", 32, 3, 2, 1, 1, false, true, RefRole::first,
         ActCount::output);
  struct Stage {
    int t, c, n, s;
  };
  const Stage stages[] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2},
                          {6, 64, 4, 2},  {6, 96, 3, 1},  {6, 160, 3, 2},
                          {6, 320, 1, 1}};
  int block_id = 0;
  for (const auto& st : stages) {
    for (int i = 0; i < st.n; ++i) {
      const std::string base = "block" + std::to_string(block_id++);
      const int stride = i == 0 ? st.s : 1;
      const int mid = w.c * st.t;
      if (st.t != 1)
        w.conv(base + ".expand", mid, 1, 1, 0, 1, false, true, RefRole::inner,
               ActCount::output);
      w.conv(base + ".dw", mid, 3, stride, 1, mid, false, true, RefRole::inner,
             ActCount::output);
      w.conv(base + ".project", st.c, 1, 1, 0, 1, false, true, RefRole::inner,
             ActCount::output);
    }
  }
  w.conv("head", 1280, 1, 1, 0, 1, false, true, RefRole::inner,
         ActCount::output);
  w.global_pool();
  w.fc("fc", 1000, true, false);
  return w.g;
}

inline ReferenceGraph build_efficientnet(int res, bool with_se) {
  Walker w;
  w.g.arch = with_se ? "enet_b0" : "enet_lite0";
  w.g.resolution = res;
  w.h = res;
  w.c = 3;
  // Convention: every non-SE conv output joins the sum, the head output
  // counted after pooling; with_se additionally counts each block's SE
  // product tensor (the rescaled depthwise output).
  w.conv("stem", 32, 3, 2, 1, 1, false, true, RefRole::first,
         ActCount::output);
  struct Stage {
    int t, c, n, s, k;
  };
  const Stage stages[] = {{1, 16, 1, 1, 3},  {6, 24, 2, 2, 3},
                          {6, 40, 2, 2, 5},  {6, 80, 3, 2, 3},
                          {6, 112, 3, 1, 5}, {6, 192, 4, 2, 5},
                          {6, 320, 1, 1, 3}};
  int block_id = 0;
  for (const auto& st : stages) {
    for (int i = 0; i < st.n; ++i) {
      const std::string base = "block" + std::to_string(block_id++);
      const int stride = i == 0 ? st.s : 1;
      const int block_in = w.c;
      const int mid = block_in * st.t;
      if (st.t != 1)
        w.conv(base + ".expand", mid, 1, 1, 0, 1, false, true, RefRole::inner,
               ActCount::output);
      w.conv(base + ".dw", mid, st.k, stride, st.k / 2, mid, false, true,
             RefRole::inner, ActCount::output);
      if (with_se) {
        const int sq = std::max(1, block_in / 4);
        w.g.weights.push_back({base + ".se.squeeze",
                               std::uint64_t(sq) * std::uint64_t(mid),
                               std::uint64_t(sq), RefRole::inner});
        w.g.weights.push_back({base + ".se.excite",
                               std::uint64_t(mid) * std::uint64_t(sq),
                               std::uint64_t(mid), RefRole::inner});
        w.g.acts.push_back({base + ".se.product",
                            std::uint64_t(mid) * std::uint64_t(w.h) *
                                std::uint64_t(w.h)});
      }
      w.conv(base + ".project", st.c, 1, 1, 0, 1, false, true, RefRole::inner,
             ActCount::none);
      w.g.acts.push_back({base + ".project.out",
                          std::uint64_t(st.c) * std::uint64_t(w.h) *
                              std::uint64_t(w.h)});
    }
  }
  w.conv("head", 1280, 1, 1, 0, 1, false, true, RefRole::inner,
         ActCount::output_pooled);
  w.global_pool();
  w.fc("fc", 1000, true, false);
  return w.g;
}

inline ReferenceGraph build_sqnxt23w2(int res) {
  Walker w;
  w.g.arch = "sqnxt23w2";
  w.g.resolution = res;
  w.h = res;
  w.c = 3;
  // Convention: every conv output joins the sum except the stem's; the two
  // head convs run after global pooling (1x1 spatial); the classifier input
  // joins as well.
  w.conv("stem", 128, 7, 2, 3, 1, false, true, RefRole::first,
         ActCount::none);
  w.pool(3, 2, 1);
  struct Chain {
    int narrow_a, reps, narrow_b, narrow_c;
  };
  struct Stage {
    int width;
    int blocks;
    bool chain;
    Chain ch;
  };
  const Stage stages[] = {
      {96, 2, false, {}},
      {192, 4, false, {}},
      {384, 8, true, {144, 413, 110, 144}},
      {512, 8, true, {224, 93, 192, 224}},
  };
  int sid = 0;
  for (const auto& st : stages) {
    const std::string base = "stage" + std::to_string(sid++);
    w.conv(base + ".reduce", st.width, 3, 2, 1, 1, false, true, RefRole::inner,
           ActCount::output);
    for (int i = 0; i < st.blocks; ++i)
      w.conv(base + ".b" + std::to_string(i), st.width, 1, 1, 0, 1, false,
             true, RefRole::inner, ActCount::output);
    if (st.chain) {
      w.conv(base + ".chain.in", st.ch.narrow_a, 1, 1, 0, 1, false, true,
             RefRole::inner, ActCount::output);
      for (int i = 0; i < st.ch.reps; ++i)
        w.conv(base + ".chain.r" + std::to_string(i), st.ch.narrow_a, 1, 1, 0,
               1, false, true, RefRole::inner, ActCount::output);
      w.conv(base + ".chain.nb", st.ch.narrow_b, 1, 1, 0, 1, false, true,
             RefRole::inner, ActCount::output);
      w.conv(base + ".chain.nc", st.ch.narrow_c, 1, 1, 0, 1, false, true,
             RefRole::inner, ActCount::output);
      w.conv(base + ".chain.out", st.width, 1, 1, 0, 1, false, true,
             RefRole::inner, ActCount::output);
    }
  }
  w.global_pool();
  w.conv("head0", 482, 1, 1, 0, 1, false, true, RefRole::inner,
         ActCount::output);
  w.conv("head1", 256, 1, 1, 0, 1, false, true, RefRole::inner,
         ActCount::output);
  w.fc("fc", 1000, false, true);
  return w.g;
}

}  // namespace detail_ref

inline ReferenceGraph build_reference_graph(const std::string& name,
                                            int input_resolution = 224) {
  require(input_resolution >= 32, "reference graph: resolution too small");
  if (name == "resnet18") return detail_ref::build_resnet18(input_resolution);
  if (name == "mobilenetv2")
    return detail_ref::build_mobilenetv2(input_resolution);
  if (name == "sqnxt23w2")
    return detail_ref::build_sqnxt23w2(input_resolution);
  if (name == "enet_lite0")
    return detail_ref::build_efficientnet(input_resolution, false);
  if (name == "enet_b0")
    return detail_ref::build_efficientnet(input_resolution, true);
  fail("reference graph: unknown architecture '" + name + "'");
}

inline std::vector<std::string> reference_architectures() {
  return {"resnet18", "mobilenetv2", "sqnxt23w2", "enet_lite0", "enet_b0"};
}

// Pinned per-category counts at 224x224 used by the verification command.
struct ReferenceCounts {
  std::string arch;
  std::uint64_t total, mvm, first, last, bn, act_sum, last_act;
};

inline std::vector<ReferenceCounts> reference_expected_counts() {
  return {
      {"resnet18", 11689512, 11679912, 9408, 513000, 9600, 2032640, 512},
      {"mobilenetv2", 3504872, 3470760, 864, 1281000, 34112, 6678112, 1280},
      {"sqnxt23w2", 20670016, 20485184, 18816, 256000, 184832, 3962208, 256},
      {"enet_b0", 5288548, 5246532, 864, 1281000, 42016, 8982784, 1280},
      {"enet_lite0", 4652008, 4609992, 864, 1281000, 42016, 6676256, 1280},
  };
}

struct ReferenceVerifyRow {
  std::string arch;
  bool pass = false;
  std::uint64_t got[7] = {};
  std::uint64_t want[7] = {};
};

inline std::vector<ReferenceVerifyRow> verify_reference_counts() {
  std::vector<ReferenceVerifyRow> rows;
  for (const auto& exp : reference_expected_counts()) {
    const ReferenceGraph g = build_reference_graph(exp.arch, 224);
    ReferenceVerifyRow row;
    row.arch = exp.arch;
    const std::uint64_t got[7] = {g.total_params(), g.mvm_params(),
                                  g.first_params(), g.last_params(),
                                  g.bn_params,      g.act_sum(),
                                  g.last_act};
    const std::uint64_t want[7] = {exp.total, exp.mvm, exp.first, exp.last,
                                   exp.bn,    exp.act_sum, exp.last_act};
    row.pass = true;
    for (int i = 0; i < 7; ++i) {
      row.got[i] = got[i];
      row.want[i] = want[i];
      if (got[i] != want[i]) row.pass = false;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mixquant
