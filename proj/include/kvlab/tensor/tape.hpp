#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/tensor/array.hpp"

namespace kvlab {

class Tape;

/// Handle to one node of a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(const Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  const Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  const Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

/// Gradients of the trainable leaves reached by one backward pass.
class Gradients {
 public:
  bool has(const Var& v) const { return grads_.contains(v.id()); }

  const Array& of(const Var& v) const {
    auto it = grads_.find(v.id());
    if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Array> grads_;
};

/// Append-only computation graph. Insertion order is a topological order,
/// so backward simply walks the nodes in reverse.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Leaf that owns its value.
  Var leaf(Array value, bool trainable = false) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.trainable = trainable && grad_enabled_;
    n.requires_grad = n.trainable;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf that refers to an array owned elsewhere; `external` must outlive the tape.
  Var leaf_ref(const Array& external, bool trainable = false) {
    Node n;
    n.op = "leaf";
    n.external = &external;
    n.trainable = trainable && grad_enabled_;
    n.requires_grad = n.trainable;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Array value) { return leaf(std::move(value), false); }
  Var constant_ref(const Array& external) { return leaf_ref(external, false); }

  /// Adds an interior node. `backward` is dropped when no input needs a gradient.
  Var record(std::string_view op, std::vector<std::size_t> inputs, Array value, BackwardFn backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (std::size_t in : inputs) {
        if (nodes_.at(in).requires_grad) {
          n.requires_grad = true;
          break;
        }
      }
    }
    if (n.requires_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Array& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::string_view op(std::size_t id) const { return nodes_.at(id).op; }

  /// Reverse-mode sweep from a scalar node. Leaves marked trainable receive
  /// gradients; everything else is discarded. The tape itself is not modified,
  /// so repeated calls give identical results.
  Gradients backward(const Var& loss) const;

 private:
  friend class BackwardContext;

  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Array value;
    const Array* external = nullptr;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
  };

  std::deque<Node> nodes_;  // stable references across push_back
  bool grad_enabled_;
};

inline const Array& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

/// Handed to a node's backward rule: read inputs, read the upstream
/// gradient, and accumulate into the inputs' gradients.
class BackwardContext {
 public:
  const Array& grad_out() const { return *grad_out_; }
  const Array& output() const { return tape_->value(node_); }
  const Array& input(std::size_t slot) const { return tape_->value(inputs().at(slot)); }
  bool needs(std::size_t slot) const { return tape_->requires_grad(inputs().at(slot)); }

  /// Accumulator for input `slot`, zero-initialised on first access.
  Array& grad(std::size_t slot) {
    const std::size_t id = inputs().at(slot);
    if (!allocated_[id]) {
      grads_[id] = Array(tape_->value(id).shape(), 0.0);
      allocated_[id] = true;
    }
    return grads_[id];
  }

 private:
  friend class Tape;
  BackwardContext(const Tape* tape, std::vector<Array>& grads, std::vector<bool>& allocated)
      : tape_(tape), grads_(grads), allocated_(allocated) {}

  const std::vector<std::size_t>& inputs() const { return tape_->nodes_[node_].inputs; }

  const Tape* tape_;
  std::vector<Array>& grads_;
  std::vector<bool>& allocated_;
  std::size_t node_ = 0;
  const Array* grad_out_ = nullptr;
};

inline Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (value(loss.id()).size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(value(loss.id()).shape()));
  }
  Gradients out;
  if (!nodes_[loss.id()].requires_grad) return out;

  std::vector<Array> grads(loss.id() + 1);
  std::vector<bool> allocated(loss.id() + 1, false);
  grads[loss.id()] = Array(value(loss.id()).shape(), 1.0);
  allocated[loss.id()] = true;

  BackwardContext ctx(this, grads, allocated);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!allocated[i] || !n.requires_grad) continue;
    if (n.trainable) {
      out.grads_.emplace(i, grads[i]);
      continue;
    }
    if (!n.backward) continue;
    ctx.node_ = i;
    ctx.grad_out_ = &grads[i];
    n.backward(ctx);
    // Interior gradients are not needed once propagated.
    grads[i] = Array();
    allocated[i] = false;
  }
  return out;
}

}  // namespace kvlab
