#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "threemt/tensor.hpp"

namespace threemt {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation record. Nodes are appended in evaluation order,
// so inputs always precede the nodes that consume them.
//
// One tape belongs to one thread; separate tapes share no mutable state.
template <typename T>
class Tape {
 public:
  // Called during backward with the node id; reads grad_of(node) and pushes
  // contributions into grad_sink(input) for each input that needs them.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, {}, false, nullptr); }

  // Differentiable leaf; its gradient is readable through grad() after backward.
  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), {}, {}, grad_enabled_, nullptr);
  }

  // Leaf bound to a model parameter. Repeated calls for the same parameter
  // return the same node; backward adds into Parameter::grad.
  Var<T> parameter(const Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, {}, {}, grad_enabled_, &p);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    }
    if (!needs) return push(std::move(value), {}, {}, false, nullptr);
    return push(std::move(value), std::move(inputs), std::move(fn), true, nullptr);
  }

  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss was recorded on a different tape");
    const Node& root = nodes_.at(loss.id());
    if (root.value.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    if (backward_done_) throw ContractError("backward already ran on this tape");
    backward_done_ = true;
    if (!root.requires_grad) return;

    grad_sink(loss.id())->fill(T(1));
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.has_grad) continue;
      if (node.backward) node.backward(*this, id);
      if (node.param != nullptr) {
        auto& dst = node.param->grad.storage();
        const auto& src = node.grad.storage();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  // Gradient accumulated for a node (zeros if nothing flowed into it).
  Tensor<T> grad(const Var<T>& v) const {
    const Node& node = nodes_.at(v.id());
    if (!node.has_grad) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Zero-initialized gradient buffer of an input, or nullptr when that input
  // does not participate in differentiation.
  Tensor<T>* grad_sink(std::size_t id) {
    Node& node = nodes_.at(id);
    if (!node.requires_grad) return nullptr;
    if (!node.has_grad) {
      node.grad = Tensor<T>(node.value.shape());
      node.has_grad = true;
    }
    return &node.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad,
              const Parameter<T>* param) {
    if (backward_done_) throw ContractError("cannot record on a tape after backward");
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(inputs), std::move(fn), param,
                          requires_grad, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  // deque keeps references to node values stable while new nodes are appended.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

}  // namespace threemt
