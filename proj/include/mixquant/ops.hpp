#pragma once

// Differentiable op set: elementwise arithmetic, conv2d (grouped), batch
// norm, relu6, pooling, affine, cross entropy, and soft-label distillation.
// Accumulation happens in the tape's value type; loops run in a fixed order
// so results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tape.hpp"

namespace mixquant {

template <typename T>
using NodePtr = typename Tape<T>::Node*;

namespace detail {
template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                             const char* op) {
  require(a.shape == b.shape, std::string(op) + ": shape mismatch " +
                                  shape_str(a.shape) + " vs " +
                                  shape_str(b.shape));
}
}  // namespace detail

template <typename T>
NodePtr<T> add(Tape<T>& t, NodePtr<T> a, NodePtr<T> b) {
  detail::check_same_shape(a->value, b->value, "add");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] + b->value[i];
  auto* n = t.alloc(std::move(out), "add");
  n->backward = [n, a, b] {
    for (std::size_t i = 0; i < n->grad.size(); ++i) {
      a->grad[i] += n->grad[i];
      b->grad[i] += n->grad[i];
    }
  };
  return n;
}

template <typename T>
NodePtr<T> sub(Tape<T>& t, NodePtr<T> a, NodePtr<T> b) {
  detail::check_same_shape(a->value, b->value, "sub");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] - b->value[i];
  auto* n = t.alloc(std::move(out), "sub");
  n->backward = [n, a, b] {
    for (std::size_t i = 0; i < n->grad.size(); ++i) {
      a->grad[i] += n->grad[i];
      b->grad[i] -= n->grad[i];
    }
  };
  return n;
}

template <typename T>
NodePtr<T> mul(Tape<T>& t, NodePtr<T> a, NodePtr<T> b) {
  detail::check_same_shape(a->value, b->value, "mul");
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] * b->value[i];
  auto* n = t.alloc(std::move(out), "mul");
  n->backward = [n, a, b] {
    for (std::size_t i = 0; i < n->grad.size(); ++i) {
      a->grad[i] += n->grad[i] * b->value[i];
      b->grad[i] += n->grad[i] * a->value[i];
    }
  };
  return n;
}

template <typename T>
NodePtr<T> add_scalar(Tape<T>& t, NodePtr<T> a, T c) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + c;
  auto* n = t.alloc(std::move(out), "add_scalar");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < n->grad.size(); ++i) a->grad[i] += n->grad[i];
  };
  return n;
}

template <typename T>
NodePtr<T> mul_scalar(Tape<T>& t, NodePtr<T> a, T c) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
  auto* n = t.alloc(std::move(out), "mul_scalar");
  n->backward = [n, a, c] {
    for (std::size_t i = 0; i < n->grad.size(); ++i)
      a->grad[i] += n->grad[i] * c;
  };
  return n;
}

template <typename T>
NodePtr<T> exp_op(Tape<T>& t, NodePtr<T> a) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->value[i]);
  auto* n = t.alloc(std::move(out), "exp");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < n->grad.size(); ++i)
      a->grad[i] += n->grad[i] * n->value[i];
  };
  return n;
}

template <typename T>
NodePtr<T> log_op(Tape<T>& t, NodePtr<T> a) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(a->value[i] > T(0), "log: non-positive input");
    out[i] = std::log(a->value[i]);
  }
  auto* n = t.alloc(std::move(out), "log");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < n->grad.size(); ++i)
      a->grad[i] += n->grad[i] / a->value[i];
  };
  return n;
}

template <typename T>
NodePtr<T> relu(Tape<T>& t, NodePtr<T> a) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] > T(0) ? a->value[i] : T(0);
  auto* n = t.alloc(std::move(out), "relu");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < n->grad.size(); ++i)
      if (a->value[i] > T(0)) a->grad[i] += n->grad[i];
  };
  return n;
}

template <typename T>
NodePtr<T> relu6(Tape<T>& t, NodePtr<T> a) {
  Tensor<T> out(a->value.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(std::max(a->value[i], T(0)), T(6));
  auto* n = t.alloc(std::move(out), "relu6");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < n->grad.size(); ++i)
      if (a->value[i] > T(0) && a->value[i] < T(6)) a->grad[i] += n->grad[i];
  };
  return n;
}

template <typename T>
NodePtr<T> sum(Tape<T>& t, NodePtr<T> a) {
  T s = T(0);
  for (std::size_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  auto* n = t.alloc(Tensor<T>::from({1}, {s}), "sum");
  n->backward = [n, a] {
    for (std::size_t i = 0; i < a->grad.size(); ++i)
      a->grad[i] += n->grad[0];
  };
  return n;
}

// Fixed-order dot product with a constant weight vector; the size penalty is
// assembled from these.
template <typename T>
NodePtr<T> weighted_sum(Tape<T>& t, NodePtr<T> a, std::vector<T> w) {
  require(a->value.size() == w.size(),
          "weighted_sum: weight count does not match element count");
  T s = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) s += a->value[i] * w[i];
  auto* n = t.alloc(Tensor<T>::from({1}, {s}), "weighted_sum");
  n->backward = [n, a, w = std::move(w)] {
    for (std::size_t i = 0; i < w.size(); ++i)
      a->grad[i] += n->grad[0] * w[i];
  };
  return n;
}

// input NCHW, kernel OIHW (I = in_channels / groups); cross-correlation.
template <typename T>
NodePtr<T> conv2d(Tape<T>& t, NodePtr<T> input, NodePtr<T> kernel, int stride,
                  int pad, int groups = 1) {
  const auto& xs = input->value.shape;
  const auto& ks = kernel->value.shape;
  require(xs.size() == 4, "conv2d: input must be NCHW, got " + shape_str(xs));
  require(ks.size() == 4, "conv2d: kernel must be OIHW, got " + shape_str(ks));
  const int N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int O = ks[0], Ik = ks[1], Kh = ks[2], Kw = ks[3];
  require(groups >= 1 && Ci % groups == 0 && O % groups == 0,
          "conv2d: channels not divisible by groups");
  require(Ik == Ci / groups,
          "conv2d: kernel input-channel dim " + std::to_string(Ik) +
              " incompatible with input channel dim " + std::to_string(Ci) +
              " at groups " + std::to_string(groups));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
  const int Ho = (H + 2 * pad - Kh) / stride + 1;
  const int Wo = (W + 2 * pad - Kw) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: empty output extent");
  const int Og = O / groups;

  Tensor<T> out({N, O, Ho, Wo});
  const T* x = input->value.data.data();
  const T* k = kernel->value.data.data();
  T* y = out.data.data();
  auto xat = [=](int n, int c, int h, int w) {
    return std::size_t(((n * Ci + c) * H + h) * W + w);
  };
  auto kat = [=](int o, int i, int h, int w) {
    return std::size_t(((o * Ik + i) * Kh + h) * Kw + w);
  };
  auto yat = [=](int n, int o, int h, int w) {
    return std::size_t(((n * O + o) * Ho + h) * Wo + w);
  };
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      const int g = o / Og, c0 = g * Ik;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          T acc = T(0);
          for (int i = 0; i < Ik; ++i)
            for (int kh = 0; kh < Kh; ++kh) {
              const int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < Kw; ++kw) {
                const int iw = ow * stride - pad + kw;
                if (iw < 0 || iw >= W) continue;
                acc += x[xat(n, c0 + i, ih, iw)] * k[kat(o, i, kh, kw)];
              }
            }
          y[yat(n, o, oh, ow)] = acc;
        }
    }

  auto* node = t.alloc(std::move(out), "conv2d");
  node->backward = [node, input, kernel, stride, pad, groups, N, Ci, H, W, O,
                    Ik, Kh, Kw, Ho, Wo, Og, xat, kat, yat] {
    const T* x = input->value.data.data();
    const T* k = kernel->value.data.data();
    const T* gy = node->grad.data.data();
    T* gx = input->grad.data.data();
    T* gk = kernel->grad.data.data();
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) {
        const int g = o / Og, c0 = g * Ik;
        for (int oh = 0; oh < Ho; ++oh)
          for (int ow = 0; ow < Wo; ++ow) {
            const T gout = gy[yat(n, o, oh, ow)];
            if (gout == T(0)) continue;
            for (int i = 0; i < Ik; ++i)
              for (int kh = 0; kh < Kh; ++kh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < Kw; ++kw) {
                  const int iw = ow * stride - pad + kw;
                  if (iw < 0 || iw >= W) continue;
                  gx[xat(n, c0 + i, ih, iw)] += gout * k[kat(o, i, kh, kw)];
                  gk[kat(o, i, kh, kw)] += gout * x[xat(n, c0 + i, ih, iw)];
                }
              }
          }
      }
  };
  return node;
}

// x (N,C) @ w (K,C)^T + b (K). Bias may be null.
template <typename T>
NodePtr<T> affine(Tape<T>& t, NodePtr<T> x, NodePtr<T> w, NodePtr<T> b) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  require(xs.size() == 2 && ws.size() == 2,
          "affine: expected 2-d input and weight");
  const int N = xs[0], C = xs[1], K = ws[0];
  require(ws[1] == C, "affine: weight inner dim " + std::to_string(ws[1]) +
                          " vs input feature dim " + std::to_string(C));
  if (b) require(b->value.size() == std::size_t(K), "affine: bias length");

  Tensor<T> out({N, K});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      T acc = b ? b->value[std::size_t(k)] : T(0);
      for (int c = 0; c < C; ++c)
        acc += x->value[std::size_t(n * C + c)] *
               w->value[std::size_t(k * C + c)];
      out[std::size_t(n * K + k)] = acc;
    }
  auto* node = t.alloc(std::move(out), "affine");
  node->backward = [node, x, w, b, N, C, K] {
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const T g = node->grad[std::size_t(n * K + k)];
        if (g == T(0)) continue;
        if (b) b->grad[std::size_t(k)] += g;
        for (int c = 0; c < C; ++c) {
          x->grad[std::size_t(n * C + c)] += g * w->value[std::size_t(k * C + c)];
          w->grad[std::size_t(k * C + c)] += g * x->value[std::size_t(n * C + c)];
        }
      }
  };
  return node;
}

struct BatchStats {
  std::vector<double> mean, var;  // per channel, population variance
};

// Training-mode batch norm over NCHW with per-channel gamma/beta. Batch
// statistics are returned through `stats` so the caller can update running
// averages; the op itself has no side effects.
template <typename T>
NodePtr<T> batchnorm_train(Tape<T>& t, NodePtr<T> x, NodePtr<T> gamma,
                           NodePtr<T> beta, T eps, BatchStats* stats) {
  const auto& xs = x->value.shape;
  require(xs.size() == 4, "batchnorm: input must be NCHW");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  require(gamma->value.size() == std::size_t(C) &&
              beta->value.size() == std::size_t(C),
          "batchnorm: parameter length " + std::to_string(gamma->value.size()) +
              " vs channel count " + std::to_string(C));
  const std::size_t plane = std::size_t(H) * std::size_t(W);
  const std::size_t m = std::size_t(N) * plane;

  std::vector<T> mean(C), inv(C);
  if (stats) {
    stats->mean.assign(std::size_t(C), 0.0);
    stats->var.assign(std::size_t(C), 0.0);
  }
  for (int c = 0; c < C; ++c) {
    T s = T(0);
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data.data() + ((std::size_t(n) * C + c) * plane);
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    const T mu = s / T(m);
    T v = T(0);
    for (int n = 0; n < N; ++n) {
      const T* p = x->value.data.data() + ((std::size_t(n) * C + c) * plane);
      for (std::size_t i = 0; i < plane; ++i) {
        const T d = p[i] - mu;
        v += d * d;
      }
    }
    v /= T(m);
    mean[std::size_t(c)] = mu;
    inv[std::size_t(c)] = T(1) / std::sqrt(v + eps);
    if (stats) {
      stats->mean[std::size_t(c)] = double(mu);
      stats->var[std::size_t(c)] = double(v);
    }
  }

  Tensor<T> out(xs);
  // xhat is saved for backward.
  auto xhat = std::make_shared<Tensor<T>>(xs);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (std::size_t(n) * C + c) * plane;
      const T mu = mean[std::size_t(c)], iv = inv[std::size_t(c)];
      const T g = gamma->value[std::size_t(c)], bt = beta->value[std::size_t(c)];
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (x->value[base + i] - mu) * iv;
        (*xhat)[base + i] = h;
        out[base + i] = g * h + bt;
      }
    }
  auto* node = t.alloc(std::move(out), "batchnorm");
  node->backward = [node, x, gamma, beta, xhat, inv, N, C, plane, m] {
    for (int c = 0; c < C; ++c) {
      T sg = T(0), sgh = T(0);
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += node->grad[base + i];
          sgh += node->grad[base + i] * (*xhat)[base + i];
        }
      }
      gamma->grad[std::size_t(c)] += sgh;
      beta->grad[std::size_t(c)] += sg;
      const T k = gamma->value[std::size_t(c)] * inv[std::size_t(c)];
      const T mg = sg / T(m), mgh = sgh / T(m);
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          x->grad[base + i] +=
              k * (node->grad[base + i] - mg - (*xhat)[base + i] * mgh);
      }
    }
  };
  return node;
}

// Eval-mode batch norm: running statistics enter as constants.
template <typename T>
NodePtr<T> batchnorm_eval(Tape<T>& t, NodePtr<T> x, NodePtr<T> gamma,
                          NodePtr<T> beta, const std::vector<T>& running_mean,
                          const std::vector<T>& running_var, T eps) {
  const auto& xs = x->value.shape;
  require(xs.size() == 4, "batchnorm: input must be NCHW");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  require(running_mean.size() == std::size_t(C) &&
              running_var.size() == std::size_t(C) &&
              gamma->value.size() == std::size_t(C),
          "batchnorm: running-stat length vs channel count " +
              std::to_string(C));
  const std::size_t plane = std::size_t(H) * std::size_t(W);
  std::vector<T> inv(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c)
    inv[std::size_t(c)] = T(1) / std::sqrt(running_var[std::size_t(c)] + eps);

  Tensor<T> out(xs);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (std::size_t(n) * C + c) * plane;
      const T mu = running_mean[std::size_t(c)], iv = inv[std::size_t(c)];
      const T g = gamma->value[std::size_t(c)], bt = beta->value[std::size_t(c)];
      for (std::size_t i = 0; i < plane; ++i)
        out[base + i] = g * (x->value[base + i] - mu) * iv + bt;
    }
  auto* node = t.alloc(std::move(out), "batchnorm_eval");
  node->backward = [node, x, gamma, beta, running_mean, inv, N, C, plane] {
    for (int c = 0; c < C; ++c) {
      const T mu = running_mean[std::size_t(c)], iv = inv[std::size_t(c)];
      const T k = gamma->value[std::size_t(c)] * iv;
      T sg = T(0), sgh = T(0);
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T g = node->grad[base + i];
          sg += g;
          sgh += g * (x->value[base + i] - mu) * iv;
          x->grad[base + i] += g * k;
        }
      }
      gamma->grad[std::size_t(c)] += sgh;
      beta->grad[std::size_t(c)] += sg;
    }
  };
  return node;
}

template <typename T>
NodePtr<T> global_avgpool(Tape<T>& t, NodePtr<T> x) {
  const auto& xs = x->value.shape;
  require(xs.size() == 4, "global_avgpool: input must be NCHW");
  const int N = xs[0], C = xs[1];
  const std::size_t plane = std::size_t(xs[2]) * std::size_t(xs[3]);
  Tensor<T> out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (std::size_t(n) * C + c) * plane;
      T s = T(0);
      for (std::size_t i = 0; i < plane; ++i) s += x->value[base + i];
      out[std::size_t(n) * C + c] = s / T(plane);
    }
  auto* node = t.alloc(std::move(out), "global_avgpool");
  node->backward = [node, x, N, C, plane] {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T g = node->grad[std::size_t(n) * C + c] / T(plane);
        const std::size_t base = (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) x->grad[base + i] += g;
      }
  };
  return node;
}

// Mean over the batch of label-smoothed negative log likelihood. The
// smoothed target distribution is s/K + (1-s) on the true class.
template <typename T>
NodePtr<T> cross_entropy(Tape<T>& t, NodePtr<T> logits,
                         const std::vector<int>& targets, T smoothing) {
  const auto& xs = logits->value.shape;
  require(xs.size() == 2, "cross_entropy: logits must be (N,K)");
  const int N = xs[0], K = xs[1];
  require(int(targets.size()) == N, "cross_entropy: target count vs batch");
  require(smoothing >= T(0) && smoothing < T(1),
          "cross_entropy: smoothing must lie in [0,1)");
  for (int n = 0; n < N; ++n)
    require(targets[std::size_t(n)] >= 0 && targets[std::size_t(n)] < K,
            "cross_entropy: target index out of range");

  auto softmax = std::make_shared<Tensor<T>>(xs);
  T loss = T(0);
  for (int n = 0; n < N; ++n) {
    const T* l = logits->value.data.data() + std::size_t(n) * K;
    T mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    T z = T(0);
    for (int k = 0; k < K; ++k) z += std::exp(l[k] - mx);
    const T lse = mx + std::log(z);
    T sum_logp = T(0);
    for (int k = 0; k < K; ++k) {
      const T logp = l[k] - lse;
      (*softmax)[std::size_t(n) * K + k] = std::exp(logp);
      sum_logp += logp;
    }
    const T logp_t = l[targets[std::size_t(n)]] - lse;
    loss += -((T(1) - smoothing) * logp_t + smoothing / T(K) * sum_logp);
  }
  loss /= T(N);
  auto* node = t.alloc(Tensor<T>::from({1}, {loss}), "cross_entropy");
  node->backward = [node, logits, softmax, targets, smoothing, N, K] {
    const T g = node->grad[0] / T(N);
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const T q = smoothing / T(K) +
                    (k == targets[std::size_t(n)] ? T(1) - smoothing : T(0));
        logits->grad[std::size_t(n) * K + k] +=
            g * ((*softmax)[std::size_t(n) * K + k] - q);
      }
  };
  return node;
}

// Temperature-scaled cross entropy between teacher and student softmax,
// multiplied by temperature^2; mean over the batch. Teacher logits are data.
template <typename T>
NodePtr<T> soft_label_kd(Tape<T>& t, NodePtr<T> student,
                         const Tensor<T>& teacher, T temperature) {
  const auto& xs = student->value.shape;
  require(xs.size() == 2, "soft_label_kd: logits must be (N,K)");
  require(teacher.shape == xs, "soft_label_kd: teacher shape " +
                                   shape_str(teacher.shape) + " vs student " +
                                   shape_str(xs));
  require(temperature > T(0), "soft_label_kd: temperature must be positive");
  const int N = xs[0], K = xs[1];

  auto ps = std::make_shared<Tensor<T>>(xs);  // softmax(student / T)
  auto pt = std::make_shared<Tensor<T>>(xs);  // softmax(teacher / T)
  auto row_softmax = [&](const T* l, T* out) {
    T mx = l[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
    T z = T(0);
    for (int k = 0; k < K; ++k) z += std::exp((l[k] - mx) / temperature);
    const T lse = std::log(z);
    for (int k = 0; k < K; ++k) out[k] = std::exp((l[k] - mx) / temperature - lse);
  };
  T loss = T(0);
  for (int n = 0; n < N; ++n) {
    row_softmax(student->value.data.data() + std::size_t(n) * K,
                ps->data.data() + std::size_t(n) * K);
    row_softmax(teacher.data.data() + std::size_t(n) * K,
                pt->data.data() + std::size_t(n) * K);
    for (int k = 0; k < K; ++k) {
      const T p = (*pt)[std::size_t(n) * K + k];
      if (p > T(0))
        loss -= p * std::log((*ps)[std::size_t(n) * K + k]);
    }
  }
  loss *= temperature * temperature / T(N);
  auto* node = t.alloc(Tensor<T>::from({1}, {loss}), "soft_label_kd");
  node->backward = [node, student, ps, pt, temperature, N, K] {
    const T g = node->grad[0] * temperature / T(N);
    for (std::size_t i = 0; i < student->grad.size(); ++i)
      student->grad[i] += g * ((*ps)[i] - (*pt)[i]);
  };
  return node;
}

}  // namespace mixquant
