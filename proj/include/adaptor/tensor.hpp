#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adaptor/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace adaptor {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
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

struct Node;
using BackwardFn = std::function<void(Node&)>;

// One vertex of the reverse-mode graph. Results of differentiable ops hold
// their parents and a closure that pushes `grad` into the parents' grads.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  bool consumed = false;     // backward already ran through this node
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording for its lifetime (evaluation, frozen features).
/// Graph buffers are large and short-lived. glibc serves big blocks with
/// fresh mmaps by default, which costs a page fault per touched page on
/// every step; raising the thresholds keeps them on the heap. No-op
/// elsewhere. Call once at startup.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Dense row-major float64 array with optional participation in the gradient
/// graph. Copies are shallow: two Tensor values may refer to the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1, 1}, {value}, requires_grad);
  }

  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return from_data({1, n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return from_data({rows.size(), cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::size_t rows() const {
    require_matrix("rows()");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_matrix("cols()");
    return node_->shape[1];
  }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; bypasses the graph. Intended for leaves (optimizer
  // updates, test perturbations).
  std::span<double> mutable_data() { return node_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values, disconnected from any graph.
  Tensor detach() const { return from_data(shape(), node_->data, false); }

  // Deep copy keeping requires_grad; never shares storage with *this.
  Tensor clone() const { return from_data(shape(), node_->data, node_->requires_grad); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  void require_matrix(const char* what) const {
    if (rank() != 2) {
      throw DimensionError(std::string(what) + " requires a rank-2 tensor, got " + shape_str(shape()));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds the result node of an op. The backward closure is attached only when
// recording is enabled and some input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                          BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

/// Reverse pass from a scalar loss. Gradients accumulate into every
/// requires_grad tensor on the path; intermediate nodes are consumed, so a
/// second call on the same graph raises StateError.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.node().get();
  if (root->consumed) throw StateError("backward() already ran on this graph; run a new forward pass");
  if (!root->requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS: every node lands after all of its parents.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw StateError("graph contains a node whose backward already ran");
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (auto* node : order) {
    if (!node->is_leaf()) {
      node->consumed = true;
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

}  // namespace adaptor
