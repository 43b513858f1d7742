// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrbert/autodiff/parameter_store.hpp"
#include "ehrbert/autodiff/tensor.hpp"
#include "ehrbert/core/error.hpp"

namespace ehrbert::ad {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape is alive and not cleared.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(index_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(index_); }
  const std::vector<T>& grad() const { return tape_->grad(index_); }

  /// Value of a single-element tensor.
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return value()[0];
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Records op applications in execution order so that reverse traversal is
/// a valid topological order. One tape belongs to one thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, nullptr, false, {}); }

  /// A free leaf that requires grad (not backed by a Parameter).
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, nullptr, true, {}); }

  /// Leaf viewing a parameter's value. Repeated calls return the same node,
  /// so gradients from every use accumulate in one place.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(Tensor<T>{}, &p.value, &p, p.trainable, {});
    param_nodes_[&p] = v.index();
    return v;
  }

  /// Records an op output. The backward function is kept only when some
  /// input requires grad.
  Var<T> record(Tensor<T> value, std::span<const std::size_t> inputs, BackwardFn backward, const char* op_name) {
    if (!value.all_finite()) throw NumericsError(std::string(op_name) + ": non-finite result");
    bool rg = false;
    for (std::size_t i : inputs) rg = rg || nodes_[i].requires_grad;
    return push(std::move(value), nullptr, nullptr, rg, rg ? std::move(backward) : BackwardFn{});
  }
  Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn backward,
                const char* op_name) {
    return record(std::move(value), std::span<const std::size_t>(inputs.begin(), inputs.size()),
                  std::move(backward), op_name);
  }

  const Tensor<T>& value(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.view ? *n.view : n.value;
  }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  /// Gradient buffer of node i, zero-allocated on first access.
  std::vector<T>& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) n.grad.assign(value(i).size(), T(0));
    return n.grad;
  }
  const std::vector<T>& grad(std::size_t i) const { return nodes_[i].grad; }

  /// Populates d(loss)/d(node) for every node reachable from `loss`. `seed`
  /// scales the whole gradient (used to average over a batch).
  void backward(Var<T> loss, T seed = T(1)) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_string(loss.shape()));
    if (!nodes_[loss.index()].requires_grad) return;
    grad(loss.index())[0] += seed;
    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  /// Adds parameter-leaf gradients into Parameter::grad. Kept separate from
  /// backward() so that tapes built on worker threads can be folded in a
  /// fixed order.
  void accumulate_parameter_grads() {
    for (auto& [param, idx] : ordered_params()) {
      Node& n = nodes_[idx];
      if (!n.requires_grad || n.grad.empty()) continue;
      param->accumulate_grad(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* view = nullptr;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* view, Parameter<T>* param, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), view, param, rg, {}, std::move(fn)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<std::pair<Parameter<T>*, std::size_t>> ordered_params() const {
    std::vector<std::pair<Parameter<T>*, std::size_t>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].param) out.emplace_back(nodes_[i].param, i);
    return out;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

/// Backward pass followed by accumulation into the parameters.
template <typename T>
void backward(Tape<T>& tape, Var<T> loss, T seed = T(1)) {
  tape.backward(loss, seed);
  tape.accumulate_parameter_grads();
}

}  // namespace ehrbert::ad
