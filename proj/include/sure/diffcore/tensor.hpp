#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sure/error.hpp"

namespace sure::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows into the node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

/// Shared handle to a dense row-major array. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_size(shape) != data.size())
      throw InvalidArgument("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor constant(Shape shape, std::vector<T> data) {
    return Tensor(std::move(shape), std::move(data), false);
  }
  static Tensor parameter(Shape shape, std::vector<T> data) {
    return Tensor(std::move(shape), std::move(data), true);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  /// Mutable access for parameter updates and test perturbation; never use on
  /// tensors that a live tape still references for its backward pass.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Deep copy with fresh storage and no gradient.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->data, requires_grad);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations. Entries are appended as ops
/// execute, so operands always precede their consumers.
template <class T>
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : recording_(mode == Mode::record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_ && !consumed_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  /// Builds an op output. The backward rule is stored only when some operand
  /// requires a gradient.
  template <class Backward>
  Tensor<T> emit(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                 Backward&& backward) {
    return emit(std::move(shape), std::move(data),
                std::span<const Tensor<T>* const>(inputs.begin(), inputs.size()),
                std::forward<Backward>(backward));
  }

  template <class Backward>
  Tensor<T> emit(Shape shape, std::vector<T> data, std::span<const Tensor<T>* const> inputs,
                 Backward&& backward) {
    bool needs = false;
    if (recording())
      for (const auto* in : inputs) needs = needs || in->requires_grad();
    Tensor<T> out(std::move(shape), std::move(data), needs);
    if (needs) {
      entries_.push_back(Entry{[out, fn = std::forward<Backward>(backward)]() {
        if (!out.has_grad()) return;  // nothing downstream depended on it
        fn(out.grad());
      }});
    }
    return out;
  }

  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
      throw InvalidArgument("backward requires a scalar loss, got shape " +
                            shape_str(loss.shape()));
    if (consumed_) throw StateError("backward called on an already consumed tape");
    consumed_ = true;
    if (!loss.requires_grad()) {
      entries_.clear();
      return;
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    entries_.clear();
  }

 private:
  struct Entry {
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool recording_;
  bool consumed_ = false;
};

template <class T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

/// Gradient buffer of `t` (allocated on demand), or an empty span when `t` is
/// not differentiable.
template <class T>
inline std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.requires_grad()) return {};
  t.node()->ensure_grad();
  return t.node()->grad;
}

}  // namespace sure::diff
