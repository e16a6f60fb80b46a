// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a shared handle to a graph node. Leaves hold parameters or inputs;
// every differentiable op records its parents and a closure that pushes the
// incoming gradient back into them. backward() walks the graph in reverse
// topological order exactly once per node.

#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcgan/tensor.hpp"

namespace mcgan {

namespace detail {
inline thread_local int no_grad_depth = 0;
}  // namespace detail

// While alive, ops on this thread do not record a graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient accumulated by backward(); zero-shaped until first written.
  Tensor<T>& grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape(); }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(T(0));
  }

  // A constant sharing no graph with this variable.
  Var detach() const { return constant(node_->value); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

// Build an op result. The closure receives the gradient w.r.t. the result and
// must accumulate into parents that require gradients.
template <class T, class Backward>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!grad_enabled()) return Var<T>(std::move(n));
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return Var<T>(std::move(n));
  n->requires_grad = true;
  for (auto& p : parents) n->parents.push_back(p.node_ptr());
  n->backward = std::forward<Backward>(backward);
  return Var<T>(std::move(n));
}

// Accumulate g into the gradient of v (no-op when v needs no gradient).
template <class T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  Node<T>* node = v.node();
  if (node->grad.shape() != node->value.shape()) {
    node->grad = g;
    return;
  }
  T* dst = node->grad.data();
  const T* src = g.data();
  for (std::size_t i = 0, n = node->grad.size(); i < n; ++i) dst[i] += src[i];
}

template <class T>
void accumulate(const Var<T>& v, Tensor<T>&& g) {
  if (!v.requires_grad()) return;
  Node<T>* node = v.node();
  if (node->grad.shape() != node->value.shape()) {
    node->grad = std::move(g);
    return;
  }
  accumulate(v, static_cast<const Tensor<T>&>(g));
}

// Backpropagate from a scalar root with seed gradient 1.
template <class T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw ShapeError("backward: root must be a scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.shape() == n->value.shape()) {
      n->backward(n->grad);
      // Interior gradients are consumed; only leaves keep theirs.
      if (n != root.node()) n->grad = Tensor<T>();
    }
  }
}

}  // namespace mcgan
