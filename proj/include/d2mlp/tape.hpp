// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "d2mlp/tensor.hpp"

namespace d2mlp {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tape<T>* tape_ptr() const { return tape_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t extent(std::size_t axis) const { return value().extent(axis); }
  std::size_t rank() const { return value().rank(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode record for one forward pass. Single writer; nodes are appended
/// in evaluation order so the node list is already topologically sorted.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into inputs.
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), needs ? std::move(backward) : Backward{}, needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id()].requires_grad;
  }

  /// Mutable gradient accumulator for v, zero-initialized on first access.
  Tensor<T>& grad_buffer(const Var<T>& v) {
    check_owner(v);
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor<T>& g = grads_[v.id()];
    if (g.empty()) g = Tensor<T>::zeros(nodes_[v.id()].value.shape());
    return g;
  }

  /// Gradient of the last backward() target w.r.t. v; nullptr if v was unreachable.
  const Tensor<T>* grad(const Var<T>& v) const {
    check_owner(v);
    if (v.id() >= grads_.size() || grads_[v.id()].empty()) return nullptr;
    return &grads_[v.id()];
  }

  /// Like grad(), but unreachable values report an all-zero gradient.
  Tensor<T> grad_or_zeros(const Var<T>& v) const {
    const Tensor<T>* g = grad(v);
    return g ? *g : Tensor<T>::zeros(value(v).shape());
  }

  void backward(const Var<T>& loss) {
    check_owner(loss);
    if (value(loss).size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    grads_.clear();
    grads_.resize(nodes_.size());
    grads_[loss.id()] = Tensor<T>(value(loss).shape(), T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.backward || grads_[id].empty()) continue;
      // grads_ is sized up front, so this reference stays valid while inputs accumulate.
      node.backward(*this, grads_[id]);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Id the next recorded node will get; lets a backward rule refer to its own output.
  std::size_t next_id() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Backward backward;
    bool requires_grad = false;
  };

  void check_owner(const Var<T>& v) const {
    if (v.tape_ptr() != this || v.id() >= nodes_.size()) {
      throw Error("variable does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;  // references stay valid across appends
  std::vector<Tensor<T>> grads_;
};

}  // namespace d2mlp
