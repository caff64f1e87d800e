#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mdsnn/error.hpp"
#include "mdsnn/tensor.hpp"

namespace mdsnn {

template <typename Real>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename Real = double>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor<Real>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

// Append-only record of differentiable ops. Nodes are pushed during the
// forward pass; backward() walks them in reverse insertion order, which is a
// reverse topological order because inputs always precede their consumers.
// Nodes that do not depend on any gradient-requiring leaf carry no backward
// rule, so constant subgraphs (teacher passes, evaluation) cost no grad work.
template <typename Real = double>
class Tape {
 public:
  // Receives the gradient of the node's output and pushes input gradients
  // through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor<Real>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> leaf(Tensor<Real> value, bool requires_grad = false,
                 std::string name = "leaf") {
    if (!value.defined()) throw UsageError("leaf '" + name + "' is undefined");
    check_finite(name, value);
    nodes_.push_back(Node{std::move(name), std::move(value), Tensor<Real>(),
                          requires_grad, nullptr});
    return Var<Real>{this, nodes_.size() - 1};
  }

  Var<Real> constant(Tensor<Real> value, std::string name = "constant") {
    return leaf(std::move(value), false, std::move(name));
  }

  // Appends the result of an op. The backward rule is kept only when at least
  // one input requires a gradient.
  Var<Real> record(std::string op, Tensor<Real> value,
                   std::initializer_list<Var<Real>> inputs, BackwardFn fn) {
    if (in_backward_) {
      throw UsageError("cannot record '" + op + "' during backward");
    }
    bool needs_grad = false;
    for (const auto& in : inputs) {
      check_owned(in, op);
      needs_grad = needs_grad || nodes_[in.id].requires_grad;
    }
    check_finite(op, value);
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor<Real>(),
                          needs_grad, needs_grad ? std::move(fn) : nullptr});
    return Var<Real>{this, nodes_.size() - 1};
  }

  const Tensor<Real>& value(const Var<Real>& v) const {
    check_owned(v, "value");
    return nodes_[v.id].value;
  }

  bool requires_grad(const Var<Real>& v) const {
    check_owned(v, "requires_grad");
    return nodes_[v.id].requires_grad;
  }

  const std::string& op(const Var<Real>& v) const {
    check_owned(v, "op");
    return nodes_[v.id].op;
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  // Gradient accumulated at v by the last backward(); zeros if none reached.
  Tensor<Real> grad(const Var<Real>& v) const {
    check_owned(v, "grad");
    const auto& n = nodes_[v.id];
    if (n.grad.defined()) return n.grad;
    return Tensor<Real>::zeros(n.value.shape());
  }

  void accumulate(const Var<Real>& v, const Tensor<Real>& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient for '" + n.op + "' has shape " +
                       to_string(g.shape()) + ", expected " +
                       to_string(n.value.shape()));
    }
    if (!n.grad.defined()) {
      n.grad = g;
    } else {
      add_inplace(n.grad, g);
    }
  }

  // Reverse-mode sweep seeded at `output`. Clears gradients from any earlier
  // sweep first, so repeated calls are idempotent.
  void backward(const Var<Real>& output, const Tensor<Real>& seed) {
    if (nodes_.empty() || output.tape != this || output.id >= nodes_.size()) {
      throw UsageError("backward() called before forward recorded any op");
    }
    if (seed.shape() != nodes_[output.id].value.shape()) {
      throw ShapeError("backward seed shape " + to_string(seed.shape()) +
                       " does not match output shape " +
                       to_string(nodes_[output.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<Real>();
    in_backward_ = true;
    accumulate(output, seed);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || !n.grad.defined()) continue;
      const Tensor<Real> g = n.grad;
      n.backward(*this, g);
    }
    in_backward_ = false;
  }

  void backward(const Var<Real>& output) {
    check_owned(output, "backward");
    backward(output, Tensor<Real>::ones(nodes_[output.id].value.shape()));
  }

 private:
  struct Node {
    std::string op;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad;
    BackwardFn backward;
  };

  void check_owned(const Var<Real>& v, std::string_view where) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw UsageError(std::string(where) + ": variable does not belong to this tape");
    }
  }

  static void check_finite(const std::string& op, const Tensor<Real>& t) {
    if (!t.all_finite()) {
      throw NumericError("op '" + op + "' produced a non-finite value");
    }
  }

  std::vector<Node> nodes_;
  bool in_backward_ = false;
};

}  // namespace mdsnn
