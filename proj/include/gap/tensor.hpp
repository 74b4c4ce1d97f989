// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations (see ops.hpp) build
// the graph eagerly: the forward value is computed immediately and, when any
// input requires a gradient, a backward closure is recorded on the result.
// Nodes that do not require gradients keep no parents, so inference builds no
// graph at all.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gap/errors.hpp"

namespace gap {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename T>
struct Node {
  Shape shape;
  // Shared so that parameter replicas used by parallel workers can read the
  // same buffer while accumulating into private gradients.
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::uint64_t id = next_node_id();

  bool is_leaf() const { return !backward; }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data->size()) grad.assign(data->size(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (checked_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + gap::to_string(shape) +
                           " does not match " + std::to_string(values.size()) +
                           " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::make_shared<std::vector<T>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data->size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }

  std::span<const T> values() const { return *node_->data; }
  /// Mutable view of the values; only meaningful for leaves (parameters).
  std::span<T> mutable_values() { return *node_->data; }
  T item() const {
    if (numel() != 1) {
      throw UsageError("item() on tensor of shape " + gap::to_string(shape()));
    }
    return (*node_->data)[0];
  }
  T at(std::size_t flat) const { return node_->data->at(flat); }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty until a backward pass reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  /// A new leaf sharing this tensor's value buffer but owning its gradient.
  Tensor share() const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  /// A deep copy detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), std::vector<T>(values().begin(), values().end()),
                  requires_grad);
  }

  const NodePtr& node() const { return node_; }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + gap::to_string(shape));
    }
    return gap::numel(shape);
  }

  NodePtr node_;
};

namespace detail {

/// Creates an op result. The backward closure receives the result node and
/// must accumulate into the gradients of the listed parents.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(values), false);
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

/// Populates gradients of every tensor reachable from `loss` that requires a
/// gradient. Leaf gradients accumulate across calls; intermediate gradients
/// are recomputed from scratch each call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " +
                     to_string(loss.shape()));
  }
  using NodeT = detail::Node<T>;
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (node->is_leaf()) {
      node->ensure_grad();
    } else {
      node->grad.assign(node->data->size(), T{0});
    }
  }
  loss.node()->grad.assign(1, T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

}  // namespace gap
