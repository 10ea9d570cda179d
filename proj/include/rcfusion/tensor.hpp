// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Every differentiable op
// creates a new Node that remembers its inputs and a backward closure; the
// set of nodes reachable from a scalar root forms the tape. Node ids grow
// monotonically, so sorting by id gives a valid reverse topological order.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rcfusion/error.hpp"

#ifndef RCF_CHECK_FINITE
#ifdef NDEBUG
#define RCF_CHECK_FINITE 0
#else
#define RCF_CHECK_FINITE 1
#endif
#endif

namespace rcf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double>;

enum class OpKind : std::uint8_t {
  Leaf,
  Matmul,
  Transpose,
  Add,
  Sub,
  Mul,
  Affine,
  AddRowVector,
  Sum,
  SumSquares,
  Relu,
  Sigmoid,
  Tanh,
  Softmax,
  LogSoftmax,
  CrossEntropy,
  NllFromProbs,
  Concat,
  Slice,
  Reshape,
  Conv2d,
  MaxPool2d,
  GlobalMaxPool,
  GlobalAvgPool,
  BatchNormTrain,
  BatchNormInfer,
};

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class BranchTraceState {
 public:
  void record(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }  // FNV-1a style
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline BranchTraceState*& branch_trace_slot() {
  thread_local BranchTraceState* active = nullptr;
  return active;
}

}  // namespace detail

/// True while operations record onto the tape.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Fingerprint of the branch decisions (ReLU masks, pooling argmax) taken
/// by piecewise ops on this thread while the trace is alive. Two forward
/// passes with equal fingerprints lie on the same smooth piece.
class BranchTrace {
 public:
  BranchTrace() : previous_(detail::branch_trace_slot()) { detail::branch_trace_slot() = &state_; }
  ~BranchTrace() { detail::branch_trace_slot() = previous_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t fingerprint() const { return state_.value(); }

 private:
  detail::BranchTraceState state_;
  detail::BranchTraceState* previous_;
};

inline bool branch_tracing() { return detail::branch_trace_slot() != nullptr; }
inline void record_branch(std::uint64_t v) {
  if (auto* t = detail::branch_trace_slot()) t->record(v);
}

template <Scalar T>
struct Node {
  std::uint64_t id = 0;
  OpKind op = OpKind::Leaf;
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return op == OpKind::Leaf; }

  /// Gradient buffer, zero-initialized on first use.
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <Scalar T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() : Tensor(Shape{0}, std::vector<T>{}) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<Node<T>>();
    node_->id = detail::node_counter().fetch_add(1);
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }
  /// 2-D tensor from nested rows; convenient in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    std::vector<T> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values), requires_grad);
  }
  static Tensor vector(std::initializer_list<T> values, bool requires_grad = false) {
    return Tensor(Shape{values.size()}, std::vector<T>(values), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  /// In-place access for leaves (parameters updated by an optimizer).
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw ValueError("only leaf tensors may be mutated in place");
    return node_->data;
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::initializer_list<std::size_t> index) const { return node_->data[offset(index)]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ValueError("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  std::uint64_t id() const { return node_->id; }
  OpKind op() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad_data() const { return node_->grad; }
  /// Gradient as a detached tensor of identical shape, if populated.
  std::optional<Tensor> grad() const {
    if (!has_grad()) return std::nullopt;
    return Tensor(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const NodePtr& node() const { return node_; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : index) {
      if (v >= node_->shape[i]) throw ShapeError("index out of range");
      off = off * node_->shape[i] + v;
      ++i;
    }
    return off;
  }

  NodePtr node_;
};

namespace detail {

template <Scalar T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace detail

/// Creates the output node of a differentiable operation. The backward
/// closure receives the output node and adds into `inputs[i]->grad_buffer()`
/// for every input that requires a gradient.
template <Scalar T>
Tensor<T> make_op(OpKind kind, Shape shape, std::vector<T> values,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values));
  auto& node = *out.node();
  node.op = kind;
#if RCF_CHECK_FINITE
  if (!detail::all_finite<T>(node.data)) {
    const bool inputs_finite = std::all_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) {
      return detail::all_finite<T>(t.data());
    });
    if (inputs_finite) {
      throw ValueError("non-finite output from op " + std::to_string(static_cast<int>(kind)) +
                       " with finite inputs");
    }
  }
#endif
  const bool track = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const auto& t) {
                       return t.requires_grad();
                     });
  if (track) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls until zero_grad(); intermediate gradients and the recorded graph
/// are released afterwards.
template <Scalar T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw ValueError("backward called on a tensor that is not attached to the tape");
  }

  // shared ownership keeps every node alive while inputs are being cleared
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::shared_ptr<Node<T>>> stack{root.node()};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    for (auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->id > b->id; });

  root.node()->grad_buffer()[0] += T(1);
  for (auto& n : order) {
    if (n->is_leaf()) continue;
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
  }
  for (auto& n : order) {
    if (n->is_leaf()) continue;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->backward_fn = nullptr;
    n->inputs.clear();
  }
}

}  // namespace rcf
