#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mlore/tensor.hpp"

namespace mlore {

/// Thread-local switch that disables tape recording (evaluation, folding).
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool detached = false;
  bool consumed = false;  // set once backward() has run from this node
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return !grad.empty(); }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle onto a node of the operator graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool valid() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool detached() const { return node_->detached; }
  bool has_grad() const { return node_->has_grad(); }
  /// Gradient buffer; all zeros when nothing has flowed here yet.
  Tensor<T> grad() const { return node_->has_grad() ? node_->grad : Tensor<T>(shape()); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an operator output. When no parent requires a gradient (or grad
/// mode is off) the node is a plain constant and the backward rule is dropped.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.shared());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

/// Copy of x that blocks gradient flow to x's producers. Consumers of the
/// detached copy still receive gradients for their own parameters.
template <typename T>
Var<T> detach(const Var<T>& x) {
  auto node = std::make_shared<Node<T>>();
  node->value = x.value();
  node->detached = true;
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node that requires them; intermediate buffers are released.
template <typename T>
void backward(const Var<T>& loss) {
  Node<T>* root = loss.node();
  if (root->value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(root->value.shape()));
  }
  if (root->consumed) throw ContractError("backward: called twice on the same graph without rebuilding it");
  root->consumed = true;
  if (!root->requires_grad) return;

  // Interior nodes are owned only by their consumers' parent lists, which are
  // cleared during the sweep, so the order keeps them alive.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
  stack.emplace_back(loss.shared(), 0);
  seen.insert(root);
  while (!stack.empty()) {
    Node<T>* node = stack.back().first.get();
    const std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      const auto& p = node->parents[next];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(std::move(stack.back().first));
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    if (!n->parents.empty()) {
      // Interior node: free the graph edges and the gradient buffer.
      n->backward_fn = nullptr;
      n->parents.clear();
      if (n != root) n->grad = Tensor<T>();
    }
  }
}

}  // namespace mlore
