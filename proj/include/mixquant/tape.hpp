#pragma once

// Minimal reverse-mode autodiff. Nodes are appended in evaluation order, so
// reverse creation order is a valid reverse-topological traversal; backward
// visits each node exactly once. Ops that need a non-default backward (the
// quantizer) install a custom closure like any other op.

#include <deque>
#include <functional>
#include <memory>
#include <string>

#include "tensor.hpp"

namespace mixquant {

template <typename T = float>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // same shape as value, zero-initialised
    bool requires_grad = false;
    std::string op;
    std::function<void()> backward;  // empty for leaves
  };

  Node* leaf(Tensor<T> v, bool requires_grad, std::string name = "leaf") {
    Node* n = alloc(std::move(v), std::move(name));
    n->requires_grad = requires_grad;
    return n;
  }

  Node* constant(Tensor<T> v, std::string name = "const") {
    return leaf(std::move(v), false, std::move(name));
  }

  // Allocates the node; the caller installs n->backward afterwards so the
  // closure can capture the node's own address.
  Node* alloc(Tensor<T> v, std::string op) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->grad = Tensor<T>(v.shape, T(0));
    n->value = std::move(v);
    n->op = std::move(op);
    return n;
  }

  // Reverse accumulation from a scalar loss. All nodes created so far are
  // visited in reverse creation order; nodes past the loss carry zero grad
  // and contribute nothing.
  void backward(Node* loss) {
    require(loss->value.size() == 1, "backward requires a scalar loss");
    loss->grad.data[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->backward) (*it)->backward();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  std::deque<std::unique_ptr<Node>> nodes_;  // stable addresses
};

}  // namespace mixquant
