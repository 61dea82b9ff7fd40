// Forward oracles and finite-difference gradient checks for every tape op.
// Forward values are compared against independent reimplementations
// (brute-force convolution, manual per-channel statistics, double-precision
// log-softmax); gradients are compared against central differences on the
// 64-bit instantiation.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mixquant/ops.hpp"
#include "testutil.hpp"

using namespace mixquant;
using testutil::fd_check;
using testutil::random_tensor;

namespace {

// Rebuild-and-evaluate helper: runs `build` on a fresh tape over the given
// leaf values and returns the scalar loss value.
double eval_graph(
    const std::vector<Tensor<double>>& leaves,
    const std::function<Tape<double>::Node*(
        Tape<double>&, std::vector<Tape<double>::Node*>&)>& build) {
  Tape<double> t;
  std::vector<Tape<double>::Node*> nodes;
  nodes.reserve(leaves.size());
  for (const auto& v : leaves) nodes.push_back(t.leaf(v, true));
  return build(t, nodes)->value[0];
}

// One-call analytic-vs-FD comparison for a graph over `leaves`.
testutil::FdReport check_gradients(
    std::vector<Tensor<double>> leaves,
    const std::function<Tape<double>::Node*(
        Tape<double>&, std::vector<Tape<double>::Node*>&)>& build,
    double h = 1e-3) {
  Tape<double> t;
  std::vector<Tape<double>::Node*> nodes;
  for (const auto& v : leaves) nodes.push_back(t.leaf(v, true));
  auto* loss = build(t, nodes);
  t.backward(loss);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(nodes.size());
  for (auto* n : nodes) analytic.push_back(n->grad);
  return fd_check(
      leaves, analytic,
      [&](const std::vector<Tensor<double>>& ls) { return eval_graph(ls, build); },
      h);
}

}  // namespace

TEST_CASE("conv2d forward matches the brute-force oracle", "[ops]") {
  struct Case {
    std::vector<int> xs, ws;
    int stride, pad, groups;
  };
  const std::vector<Case> cases = {
      {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1, 1},   // standard 3x3
      {{1, 4, 7, 7}, {6, 4, 3, 3}, 2, 1, 1},   // stride 2, odd extent
      {{2, 6, 6, 6}, {6, 1, 3, 3}, 1, 1, 6},   // depthwise
      {{1, 8, 5, 5}, {4, 8, 1, 1}, 1, 0, 1},   // pointwise
      {{1, 6, 8, 8}, {6, 1, 3, 3}, 2, 1, 6},   // depthwise stride 2
      {{2, 4, 4, 4}, {8, 2, 3, 3}, 1, 1, 2},   // two groups
  };
  int cseed = 100;
  for (const auto& c : cases) {
    auto x = random_tensor<float>(c.xs, std::uint64_t(cseed++));
    auto w = random_tensor<float>(c.ws, std::uint64_t(cseed++));
    Tape<float> t;
    auto* xn = t.leaf(x, false);
    auto* wn = t.leaf(w, false);
    auto* y = conv2d(t, xn, wn, c.stride, c.pad, c.groups);
    auto want = testutil::conv2d_oracle(x, w, c.stride, c.pad, c.groups);
    REQUIRE(y->value.shape == want.shape);
    for (std::size_t i = 0; i < want.size(); ++i)
      REQUIRE(y->value[i] == Catch::Approx(want[i]).margin(1e-4));
  }
}

TEST_CASE("conv2d gradients match finite differences", "[ops]") {
  auto x = random_tensor<double>({1, 3, 5, 5}, 7);
  auto w = random_tensor<double>({4, 3, 3, 3}, 8);
  auto rep = check_gradients({x, w}, [](Tape<double>& t, auto& n) {
    return sum(t, conv2d(t, n[0], n[1], 2, 1, 1));
  });
  INFO("analytic " << rep.worst_analytic << " fd " << rep.worst_fd);
  REQUIRE(rep.max_rel < 1e-6);
}

TEST_CASE("depthwise conv2d gradients match finite differences", "[ops]") {
  auto x = random_tensor<double>({2, 4, 5, 5}, 9);
  auto w = random_tensor<double>({4, 1, 3, 3}, 10);
  // Weighted reduction so per-element gradients differ.
  std::vector<double> wts;
  auto rep = check_gradients({x, w}, [](Tape<double>& t, auto& n) {
    auto* y = conv2d(t, n[0], n[1], 1, 1, 4);
    std::vector<double> coef(y->value.size());
    for (std::size_t i = 0; i < coef.size(); ++i)
      coef[i] = 0.25 + 0.01 * double(i % 17) * (i % 2 ? 1 : -1);
    return weighted_sum(t, y, std::move(coef));
  });
  REQUIRE(rep.max_rel < 1e-6);
}

TEST_CASE("affine forward and gradients", "[ops]") {
  auto x = random_tensor<double>({3, 5}, 11);
  auto w = random_tensor<double>({4, 5}, 12);
  auto b = random_tensor<double>({4}, 13);

  Tape<double> t;
  auto* xn = t.leaf(x, false);
  auto* wn = t.leaf(w, false);
  auto* bn = t.leaf(b, false);
  auto* y = affine(t, xn, wn, bn);
  for (int n = 0; n < 3; ++n)
    for (int k = 0; k < 4; ++k) {
      double acc = b[std::size_t(k)];
      for (int c = 0; c < 5; ++c)
        acc += x[std::size_t(n * 5 + c)] * w[std::size_t(k * 5 + c)];
      REQUIRE(y->value[std::size_t(n * 4 + k)] == Catch::Approx(acc));
    }

  auto rep = check_gradients({x, w, b}, [](Tape<double>& t2, auto& n) {
    auto* out = affine(t2, n[0], n[1], n[2]);
    std::vector<double> coef(out->value.size());
    for (std::size_t i = 0; i < coef.size(); ++i) coef[i] = 0.1 * double(i) - 0.5;
    return weighted_sum(t2, out, std::move(coef));
  });
  REQUIRE(rep.max_rel < 1e-6);
}

TEST_CASE("batchnorm_train forward matches manual statistics", "[ops]") {
  auto x = random_tensor<float>({3, 4, 5, 5}, 14);
  auto gamma = random_tensor<float>({4}, 15, 0.5f, 1.5f);
  auto beta = random_tensor<float>({4}, 16, -0.5f, 0.5f);
  const float eps = 1e-5f;

  Tape<float> t;
  auto* xn = t.leaf(x, false);
  auto* gn = t.leaf(gamma, false);
  auto* bn = t.leaf(beta, false);
  BatchStats stats;
  auto* y = batchnorm_train(t, xn, gn, bn, eps, &stats);

  const int N = 3, C = 4;
  const std::size_t plane = 25;
  for (int c = 0; c < C; ++c) {
    // Manual population mean/variance over the (N, H, W) extent.
    double s = 0, s2 = 0;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (std::size_t(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        s += x[base + i];
        s2 += double(x[base + i]) * x[base + i];
      }
    }
    const double cnt = double(N) * double(plane);
    const double mu = s / cnt;
    const double var = s2 / cnt - mu * mu;
    REQUIRE(stats.mean[std::size_t(c)] == Catch::Approx(mu).margin(1e-5));
    REQUIRE(stats.var[std::size_t(c)] == Catch::Approx(var).margin(1e-5));
    const double iv = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (std::size_t(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double want =
            gamma[std::size_t(c)] * (x[base + i] - mu) * iv + beta[std::size_t(c)];
        REQUIRE(y->value[base + i] == Catch::Approx(want).margin(1e-4));
      }
    }
  }
}

TEST_CASE("batchnorm_train gradients match finite differences", "[ops]") {
  auto x = random_tensor<double>({2, 3, 4, 4}, 17);
  auto gamma = random_tensor<double>({3}, 18, 0.5, 1.5);
  auto beta = random_tensor<double>({3}, 19, -0.5, 0.5);
  auto rep = check_gradients({x, gamma, beta}, [](Tape<double>& t, auto& n) {
    BatchStats st;
    auto* y = batchnorm_train(t, n[0], n[1], n[2], 1e-5, &st);
    std::vector<double> coef(y->value.size());
    for (std::size_t i = 0; i < coef.size(); ++i)
      coef[i] = std::sin(0.37 * double(i + 1));
    return weighted_sum(t, y, std::move(coef));
  });
  INFO("analytic " << rep.worst_analytic << " fd " << rep.worst_fd);
  REQUIRE(rep.max_rel < 1e-5);
}

TEST_CASE("batchnorm_eval forward and gradients", "[ops]") {
  auto x = random_tensor<double>({2, 3, 4, 4}, 20);
  auto gamma = random_tensor<double>({3}, 21, 0.5, 1.5);
  auto beta = random_tensor<double>({3}, 22, -0.5, 0.5);
  const std::vector<double> mu = {0.1, -0.2, 0.05};
  const std::vector<double> var = {1.1, 0.7, 0.9};

  Tape<double> t;
  auto* y = batchnorm_eval(t, t.leaf(x, false), t.leaf(gamma, false),
                           t.leaf(beta, false), mu, var, 1e-5);
  const std::size_t plane = 16;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      const std::size_t base = (std::size_t(n) * 3 + c) * plane;
      const double iv = 1.0 / std::sqrt(var[std::size_t(c)] + 1e-5);
      for (std::size_t i = 0; i < plane; ++i) {
        const double want =
            gamma[std::size_t(c)] * (x[base + i] - mu[std::size_t(c)]) * iv +
            beta[std::size_t(c)];
        REQUIRE(y->value[base + i] == Catch::Approx(want));
      }
    }

  auto rep = check_gradients({x, gamma, beta}, [&](Tape<double>& t2, auto& n) {
    auto* out = batchnorm_eval(t2, n[0], n[1], n[2], mu, var, 1e-5);
    std::vector<double> coef(out->value.size());
    for (std::size_t i = 0; i < coef.size(); ++i)
      coef[i] = std::cos(0.21 * double(i));
    return weighted_sum(t2, out, std::move(coef));
  });
  REQUIRE(rep.max_rel < 1e-8);
}

TEST_CASE("relu and relu6 forward and gradients away from kinks", "[ops]") {
  auto x = Tensor<double>::from({8}, {-3.0, -0.4, 0.3, 1.5, 4.2, 5.5, 6.7, 9.0});

  Tape<double> t;
  auto* r = relu(t, t.leaf(x, false));
  auto* r6 = relu6(t, t.leaf(x, false));
  const std::vector<double> want_r = {0, 0, 0.3, 1.5, 4.2, 5.5, 6.7, 9.0};
  const std::vector<double> want_r6 = {0, 0, 0.3, 1.5, 4.2, 5.5, 6.0, 6.0};
  for (std::size_t i = 0; i < 8; ++i) {
    REQUIRE(r->value[i] == want_r[i]);
    REQUIRE(r6->value[i] == want_r6[i]);
  }

  auto rep = check_gradients({x}, [](Tape<double>& t2, auto& n) {
    std::vector<double> coef = {1, -2, 3, -4, 5, -6, 7, -8};
    return weighted_sum(t2, relu6(t2, relu(t2, n[0])), std::move(coef));
  });
  REQUIRE(rep.max_rel < 1e-9);
}

TEST_CASE("global_avgpool forward and gradients", "[ops]") {
  auto x = random_tensor<double>({2, 3, 4, 4}, 23);
  Tape<double> t;
  auto* y = global_avgpool(t, t.leaf(x, false));
  REQUIRE(y->value.shape == std::vector<int>{2, 3});
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 16; ++i) s += x[(std::size_t(n) * 3 + c) * 16 + i];
      REQUIRE(y->value[std::size_t(n * 3 + c)] == Catch::Approx(s / 16.0));
    }

  auto rep = check_gradients({x}, [](Tape<double>& t2, auto& n) {
    std::vector<double> coef = {1, -1, 2, -2, 3, -3};
    return weighted_sum(t2, global_avgpool(t2, n[0]), std::move(coef));
  });
  REQUIRE(rep.max_rel < 1e-9);
}

TEST_CASE("cross_entropy forward matches a double-precision oracle", "[ops]") {
  const int N = 4, K = 6;
  auto logits = random_tensor<double>({N, K}, 24, -3.0, 3.0);
  const std::vector<int> targets = {2, 0, 5, 3};
  const double s = 0.1;

  Tape<double> t;
  auto* loss = cross_entropy(t, t.leaf(logits, false), targets, s);

  double want = 0;
  for (int n = 0; n < N; ++n) {
    // Manual log-softmax in long double for an independent value.
    long double mx = logits[std::size_t(n * K)];
    for (int k = 1; k < K; ++k)
      mx = std::max(mx, (long double)(logits[std::size_t(n * K + k)]));
    long double z = 0;
    for (int k = 0; k < K; ++k)
      z += expl((long double)(logits[std::size_t(n * K + k)]) - mx);
    const long double lse = mx + logl(z);
    long double row = 0;
    for (int k = 0; k < K; ++k) {
      const long double logp = (long double)(logits[std::size_t(n * K + k)]) - lse;
      const long double q =
          s / K + (k == targets[std::size_t(n)] ? (1.0L - s) : 0.0L);
      row -= q * logp;
    }
    want += double(row);
  }
  want /= N;
  REQUIRE(loss->value[0] == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("cross_entropy gradients match finite differences", "[ops]") {
  auto logits = random_tensor<double>({3, 5}, 25, -2.0, 2.0);
  const std::vector<int> targets = {4, 1, 2};
  for (double s : {0.0, 0.1}) {
    auto rep = check_gradients({logits}, [&](Tape<double>& t, auto& n) {
      return cross_entropy(t, n[0], targets, s);
    });
    REQUIRE(rep.max_rel < 1e-8);
  }
}

TEST_CASE("cross_entropy row gradients sum to zero", "[ops]") {
  auto logits = random_tensor<double>({2, 7}, 26, -2.0, 2.0);
  Tape<double> t;
  auto* ln = t.leaf(logits, true);
  auto* loss = cross_entropy(t, ln, {6, 0}, 0.1);
  t.backward(loss);
  for (int n = 0; n < 2; ++n) {
    double s = 0;
    for (int k = 0; k < 7; ++k) s += ln->grad[std::size_t(n * 7 + k)];
    REQUIRE(s == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("soft_label_kd forward and gradients", "[ops]") {
  const int N = 3, K = 5;
  auto student = random_tensor<double>({N, K}, 27, -2.0, 2.0);
  auto teacher = random_tensor<double>({N, K}, 28, -2.0, 2.0);
  const double temp = 4.0;

  Tape<double> t;
  auto* loss = soft_label_kd(t, t.leaf(student, false), teacher, temp);

  double want = 0;
  for (int n = 0; n < N; ++n) {
    auto soft = [&](const Tensor<double>& src, int k0) {
      double mx = src[std::size_t(n * K)];
      for (int k = 1; k < K; ++k) mx = std::max(mx, src[std::size_t(n * K + k)]);
      double z = 0;
      for (int k = 0; k < K; ++k)
        z += std::exp((src[std::size_t(n * K + k)] - mx) / temp);
      return std::exp((src[std::size_t(n * K + k0)] - mx) / temp) / z;
    };
    for (int k = 0; k < K; ++k)
      want -= soft(teacher, k) * std::log(soft(student, k));
  }
  want *= temp * temp / N;
  REQUIRE(loss->value[0] == Catch::Approx(want).epsilon(1e-10));

  auto rep = check_gradients({student}, [&](Tape<double>& t2, auto& n) {
    return soft_label_kd(t2, n[0], teacher, temp);
  });
  REQUIRE(rep.max_rel < 1e-8);
}

TEST_CASE("elementwise op shape mismatches are rejected", "[ops]") {
  Tape<float> t;
  auto* a = t.leaf(Tensor<float>({2, 3}, 1.0f), false);
  auto* b = t.leaf(Tensor<float>({3, 2}, 1.0f), false);
  REQUIRE_THROWS_AS(add(t, a, b), error);
  REQUIRE_THROWS_AS(sub(t, a, b), error);
  REQUIRE_THROWS_AS(mul(t, a, b), error);
  REQUIRE_THROWS_AS(weighted_sum(t, a, std::vector<float>{1.0f}), error);
}

TEST_CASE("composite graph gradient: conv + bn + relu6 + pool + ce", "[ops]") {
  auto x = random_tensor<double>({2, 2, 6, 6}, 29);
  auto w = random_tensor<double>({3, 2, 3, 3}, 30);
  auto gamma = random_tensor<double>({3}, 31, 0.8, 1.2);
  auto beta = random_tensor<double>({3}, 32, -0.1, 0.1);
  auto hw = random_tensor<double>({4, 3}, 33);
  const std::vector<int> targets = {1, 3};

  auto rep = check_gradients(
      {x, w, gamma, beta, hw},
      [&](Tape<double>& t, auto& n) {
        auto* c = conv2d(t, n[0], n[1], 1, 1, 1);
        BatchStats st;
        auto* b = batchnorm_train(t, c, n[2], n[3], 1e-5, &st);
        auto* r = relu6(t, b);
        auto* p = global_avgpool(t, r);
        auto* logits = affine(t, p, n[4], NodePtr<double>(nullptr));
        return cross_entropy(t, logits, targets, 0.1);
      },
      1e-4);
  INFO("worst leaf " << rep.worst_leaf << " analytic " << rep.worst_analytic
                     << " fd " << rep.worst_fd);
  REQUIRE(rep.max_rel < 1e-5);
}
