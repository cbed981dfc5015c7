#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmfnet/errors.hpp"

namespace nmfnet {

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

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Shared handle to an n-dimensional row-major array that can take part in a
/// recorded computation. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape.empty() ? Shape{1} : shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    const auto n = shape_numel(shape.empty() ? Shape{1} : shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->value.size(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  std::span<const T> data() const { return impl_->value; }
  std::span<T> mutable_data() const { return impl_->value; }
  const std::vector<T>& values() const { return impl_->value; }
  T item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }
  T operator[](std::size_t i) const { return impl_->value[i]; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad_mut() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  /// grad += g, taking a copy (or ownership) when no gradient exists yet.
  void accumulate_grad(std::span<const T> g) const {
    auto& dst = impl_->grad;
    if (dst.empty()) {
      dst.assign(g.begin(), g.end());
      return;
    }
    T* d = dst.data();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  }
  void accumulate_grad(std::vector<T>&& g) const {
    if (impl_->grad.empty()) {
      impl_->grad = std::move(g);
    } else {
      accumulate_grad(std::span<const T>(g));
    }
  }

  /// Deep copy with no gradient and no graph membership.
  Tensor detach() const { return Tensor(shape(), impl_->value, false); }

  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so node order is a topological order of the computation.
template <class T>
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<std::ptrdiff_t> inputs;  // producer node ids; -1 for leaves
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  /// True when the operation producing from `inputs` must be recorded.
  bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, const std::vector<Tensor<T>>& inputs, Tensor<T> output,
              std::function<void()> backward) {
    Node node;
    node.op = std::move(op);
    for (const auto& in : inputs) {
      auto it = producer_.find(in.id());
      node.inputs.push_back(it == producer_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second));
    }
    output.set_requires_grad(true);
    producer_[output.id()] = nodes_.size();
    node.output = std::move(output);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t last_backward_visits() const { return visits_; }

  /// Reverse sweep from a single-element loss. Gradients accumulate (sum over
  /// all paths) into every tensor that requires them.
  void backward(Tensor<T> loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw RankError("backward needs a scalar loss, got shape " +
                      (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    auto it = producer_.find(loss.id());
    if (it == producer_.end()) throw GraphError("loss tensor was not produced by this graph");
    loss.grad_mut()[0] += T(1);
    visits_ = 0;
    for (std::size_t i = it->second + 1; i-- > 0;) {
      auto& node = nodes_[i];
      ++visits_;
      if (!node.output.has_grad() || !node.backward) continue;
      node.backward();
    }
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> producer_;
  std::size_t visits_ = 0;
};

}  // namespace nmfnet
