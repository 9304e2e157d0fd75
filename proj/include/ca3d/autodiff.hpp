// Tape-based reverse-mode automatic differentiation over tensors.
//
// Nodes are appended to the tape as operations execute, so the tape order is
// a topological order: every node's inputs precede it. backward() walks the
// tape once, in reverse, starting at the loss.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ca3d/kernels.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows back
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  Parameter<T>* param = nullptr;
  bool requires_grad = false;

  bool half() const { return value.is_half(); }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g.storage() == value.storage() ? g : g.to_storage(value.storage());
      return;
    }
    add_into(grad.data(), g.data(), half());
  }
  /// Gradient buffer, allocated as zeros on first use, for in-place accumulation.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros_like(value);
    return grad;
  }
};

template <class T>
class Tape;

/// Handle to a value produced on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(std::shared_ptr<Node<T>> node, Tape<T>* tape) : node_(std::move(node)), tape_(tape) {}

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool half() const { return node_->value.is_half(); }
  bool requires_grad() const { return node_->requires_grad; }
  Tape<T>& tape() const { return *tape_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
  Tape<T>* tape_ = nullptr;
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Node<T>&)>;

  /// A non-recording tape evaluates operations without keeping a graph.
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  Var<T> constant(Tensor<T> value) { return make(std::move(value), false); }

  /// Leaf whose gradient can be read back after backward().
  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return make(std::move(value), requires_grad && recording_);
  }

  /// Leaf bound to a parameter; backward() accumulates into parameter.grad.
  Var<T> param(Parameter<T>& p) {
    Var<T> v = make(p.value, recording_);
    if (recording_) v.node()->param = &p;
    return v;
  }

  /// Records an operation result. `backward` reads node.grad and pushes
  /// gradients into node.inputs.
  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) needs = needs || in.requires_grad();
    if (!recording_ || !needs) return make(std::move(value), false);
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (const Var<T>& in : inputs) node->inputs.push_back(in.node());
    nodes_.push_back(node);
    return Var<T>(std::move(node), this);
  }

  /// Reverse sweep from a scalar loss; gradients land in parameter.grad for
  /// parameter leaves and in Var::grad() for other leaves.
  void backward(const Var<T>& loss) {
    if (!recording_) throw std::logic_error("backward() requires a tape recorded in training mode");
    if (loss.value().numel() != 1) throw std::invalid_argument("backward() requires a scalar loss");
    if (!loss.requires_grad()) throw std::invalid_argument("loss does not depend on any differentiable leaf");
    std::size_t end = nodes_.size();
    while (end > 0 && nodes_[end - 1] != loss.node()) --end;
    if (end == 0) throw std::invalid_argument("loss was not recorded on this tape");
    loss.node()->grad = Tensor<T>::filled(loss.shape(), T(1), loss.value().storage());
    visits_ = 0;
    for (std::size_t i = end; i-- > 0;) {
      Node<T>& node = *nodes_[i];
      ++visits_;
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(node);
      if (node.param != nullptr) {
        Parameter<T>& p = *node.param;
        if (p.grad.empty() || p.grad.shape() != p.value.shape()) p.zero_grad();
        add_into(p.grad.data(), std::span<const T>(node.grad.data()), p.value.is_half());
      }
    }
  }

 private:
  Var<T> make(Tensor<T> value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    if (requires_grad) nodes_.push_back(node);
    return Var<T>(std::move(node), this);
  }

  bool recording_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::size_t visits_ = 0;
};

/// Central finite difference of a scalar function at one coordinate, in double.
template <class T, class Fn>
double finite_diff_at(Fn&& f, const Tensor<T>& x, std::size_t index, double eps) {
  Tensor<T> probe = x;
  const T original = probe[index];
  probe[index] = static_cast<T>(static_cast<double>(original) + eps);
  const double up = static_cast<double>(f(probe));
  probe[index] = static_cast<T>(static_cast<double>(original) - eps);
  const double down = static_cast<double>(f(probe));
  return (up - down) / (2.0 * eps);
}

/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every coordinate.
template <class T, class Fn>
Tensor<double> finite_diff_grad(Fn&& f, const Tensor<T>& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor<double> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = finite_diff_at(f, x, i, eps);
  return out;
}

/// Symmetric relative error with an absolute floor for near-zero gradients.
inline double grad_relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

}  // namespace ca3d
