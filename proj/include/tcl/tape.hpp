#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tcl/error.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// Trainable tensor. Gradients accumulate across tape replays until zero_grad().
template <typename T>
struct Parameter {
  Parameter(std::string name_, BasicTensor<T> value_, bool regularize_ = true)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.shape()),
        regularize(regularize_) {}

  void zero_grad() { grad.fill(T{0}); }

  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  double lr_multiplier = 1.0;
  bool regularize = true;
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const BasicTensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

namespace testing {

// While alive, the backward pass of every node recorded under `op` receives a
// negated output gradient. Used to prove the gradient checker catches bugs.
class ScopedBackwardFault {
 public:
  explicit ScopedBackwardFault(std::string op) : previous_(std::exchange(current(), std::move(op))) {}
  ~ScopedBackwardFault() { current() = std::move(previous_); }
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

  static std::string& current() {
    thread_local std::string op;
    return op;
  }

 private:
  std::string previous_;
};

}  // namespace testing

// Records one forward pass; backward() replays it in reverse. A tape is single
// use: build a new one for every forward pass.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(TensorT value) { return push("constant", std::move(value), {}, false, nullptr); }

  Var<T> variable(TensorT value) { return push("variable", std::move(value), {}, true, nullptr); }

  // Leaf bound to a parameter. Repeated calls return the same node so every use
  // site accumulates into one gradient buffer.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push("parameter", TensorT(), {}, true, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var<T> record(std::string_view op, TensorT value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    std::vector<std::size_t> ids;
    bool needs_grad = false;
    for (const Var<T>& in : inputs) {
      check_owned(in);
      ids.push_back(in.id());
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    Var<T> v = push(op, std::move(value), std::move(ids), needs_grad, nullptr);
    if (needs_grad) nodes_[v.id()].backward = std::move(fn);
    return v;
  }

  const TensorT& value(Var<T> v) const {
    check_owned(v);
    return value(v.id());
  }

  const TensorT& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? n.param->value : n.value;
  }

  // Gradient of the last backward() with respect to `v`; zeros if unreached.
  TensorT grad(Var<T> v) const {
    check_owned(v);
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : TensorT(value(v.id()).shape());
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Mutable gradient accumulator for `id`, zero-initialised on first use.
  TensorT& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = TensorT(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void backward(Var<T> loss) {
    if (nodes_.empty()) throw StaleTapeError("backward on an empty tape: run a forward pass first");
    if (consumed_) throw StaleTapeError("backward called twice on the same tape");
    check_owned(loss);
    const Node& root = nodes_[loss.id()];
    if (value(loss.id()).size() != 1) {
      throw InvalidShapeError("backward needs a scalar loss, got shape " +
                              shape_string(value(loss.id()).shape()));
    }
    consumed_ = true;
    if (!root.requires_grad) return;
    grad_buffer(loss.id()).fill(T{1});

    const std::string& fault = testing::ScopedBackwardFault::current();
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      if (!fault.empty() && n.op == fault) {
        TensorT flipped = n.grad;
        for (T& g : flipped.data()) g = -g;
        n.backward(*this, flipped);
      } else {
        n.backward(*this, n.grad);
      }
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || !n.has_grad) continue;
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

 private:
  struct Node {
    std::string op;
    TensorT value;
    TensorT grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;  // leaf value lives in the parameter
  };

  Var<T> push(std::string_view op, TensorT value, std::vector<std::size_t> inputs,
              bool requires_grad, BackwardFn fn) {
    if (consumed_) throw StaleTapeError("cannot record onto a tape after backward()");
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  void check_owned(Var<T> v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw StaleTapeError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool consumed_ = false;
};

}  // namespace tcl
