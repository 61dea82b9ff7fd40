#pragma once

// RMS-normalized gradient descent with Nesterov momentum and decoupled
// weight decay. Per parameter: nu <- 0.9 nu + 0.1 g^2, u = g / sqrt(nu+eps),
// m <- u + 0.9 m, theta <- theta - lr (u + 0.9 m) - lr wd theta.

#include <cmath>
#include <cstddef>
#include <vector>

#include "common.hpp"

namespace mixquant {

struct OptimizerConfig {
  double rms_decay = 0.9;
  double eps = 1e-8;
  double momentum = 0.9;
};

struct OptimizerGroup {
  std::vector<float> nu, mom;
};

class RmsOptimizer {
 public:
  explicit RmsOptimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  int add_group(std::size_t n) {
    groups_.push_back({std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)});
    return int(groups_.size()) - 1;
  }

  void step(int group, float* theta, const float* grad, std::size_t n,
            double lr, double weight_decay) {
    auto& g = groups_[std::size_t(group)];
    require(g.nu.size() == n, "optimizer: group size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      const double gr = double(grad[i]);
      const double nu =
          cfg_.rms_decay * double(g.nu[i]) + (1.0 - cfg_.rms_decay) * gr * gr;
      g.nu[i] = float(nu);
      const double u = gr / std::sqrt(nu + cfg_.eps);
      const double m = u + cfg_.momentum * double(g.mom[i]);
      g.mom[i] = float(m);
      theta[i] = float(double(theta[i]) - lr * (u + cfg_.momentum * m) -
                       lr * weight_decay * double(theta[i]));
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::vector<OptimizerGroup>& groups() { return groups_; }
  const std::vector<OptimizerGroup>& groups() const { return groups_; }

 private:
  OptimizerConfig cfg_;
  std::vector<OptimizerGroup> groups_;
};

}  // namespace mixquant
