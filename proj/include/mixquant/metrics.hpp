#pragma once

// Versioned training-metrics CSV. Two row kinds share one schema: per-step
// rows fill the loss columns, per-epoch eval rows fill eval_acc. Wall-clock
// carries the _nondet suffix; the rerun comparison helper drops such columns.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace mixquant {

inline const char* kMetricsSchema = "# schema=mixquant-metrics-v1";
inline const char* kMetricsHeader =
    "kind,phase,epoch,step,loss,ce,kd,penalty_w,penalty_a,beta,lr,quant_lr,"
    "weight_bits,act_bits,eval_acc,wall_ms_nondet";

struct MetricsRow {
  std::string kind = "step";  // step | eval
  int phase = 0;
  int epoch = 0;
  long long step = 0;  // 1-based within the phase
  double loss = 0, ce = 0, kd = 0, penalty_w = 0, penalty_a = 0;
  double beta = 0, lr = 0, quant_lr = 0;
  double weight_bits = 0, act_bits = 0;
  double eval_acc = -1.0;  // < 0 renders blank
  double wall_ms = 0.0;
};

namespace detail_metrics {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail_metrics

class MetricsWriter {
 public:
  MetricsWriter() = default;

  void open(const std::string& path) {
    f_.open(path, std::ios::trunc);
    require(f_.good(), "metrics: cannot open '" + path + "'");
    f_ << kMetricsSchema << "\n" << kMetricsHeader << "\n";
  }

  bool is_open() const { return f_.is_open(); }

  void row(const MetricsRow& r) {
    if (!f_.is_open()) return;
    using detail_metrics::fmt;
    f_ << r.kind << ',' << r.phase << ',' << r.epoch << ',' << r.step << ','
       << fmt(r.loss) << ',' << fmt(r.ce) << ',' << fmt(r.kd) << ','
       << fmt(r.penalty_w) << ',' << fmt(r.penalty_a) << ',' << fmt(r.beta)
       << ',' << fmt(r.lr) << ',' << fmt(r.quant_lr) << ','
       << fmt(r.weight_bits) << ',' << fmt(r.act_bits) << ','
       << (r.eval_acc < 0 ? std::string() : fmt(r.eval_acc)) << ','
       << fmt(r.wall_ms) << '\n';
  }

  void flush() {
    if (f_.is_open()) f_.flush();
  }

 private:
  std::ofstream f_;
};

// Field-wise equality of two metrics files ignoring every column whose header
// name ends in _nondet. Returns an explanation of the first difference.
inline bool metrics_equal_ignoring_nondet(const std::string& path_a,
                                          const std::string& path_b,
                                          std::string* why = nullptr) {
  auto read_lines = [](const std::string& p) {
    std::ifstream f(p);
    require(f.good(), "metrics: cannot open '" + p + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  auto note = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };

  const auto a = read_lines(path_a), b = read_lines(path_b);
  if (a.size() != b.size())
    return note("line counts differ: " + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()));
  if (a.size() < 2 || a[0] != kMetricsSchema || b[0] != kMetricsSchema)
    return note("schema line mismatch");
  const auto header = split(a[1]);
  if (a[1] != b[1]) return note("header mismatch");
  std::vector<bool> keep(header.size());
  const std::string suffix = "_nondet";
  for (std::size_t i = 0; i < header.size(); ++i)
    keep[i] = header[i].size() < suffix.size() ||
              header[i].compare(header[i].size() - suffix.size(),
                                suffix.size(), suffix) != 0;
  for (std::size_t l = 2; l < a.size(); ++l) {
    const auto fa = split(a[l]), fb = split(b[l]);
    if (fa.size() != fb.size() || fa.size() != header.size())
      return note("field count mismatch at line " + std::to_string(l + 1));
    for (std::size_t i = 0; i < fa.size(); ++i)
      if (keep[i] && fa[i] != fb[i])
        return note("line " + std::to_string(l + 1) + " column " + header[i] +
                    ": '" + fa[i] + "' vs '" + fb[i] + "'");
  }
  return true;
}

}  // namespace mixquant
