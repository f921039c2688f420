#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "mgil/tensor.hpp"

namespace mgil {

enum class Mode { train, eval };

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = 0;
};

/// Ordered record of primitive applications for reverse-mode differentiation.
///
/// Values live on the tape; parameters are referenced, not copied, and their
/// gradients are accumulated into the referenced tensor's grad buffer when
/// backward() reaches them. A tape is single-threaded and single-use: clear()
/// it (or make a new one) per forward pass.
template <typename Scalar>
class GradTape {
public:
  /// Receives the gradient of this node's output; accumulates into inputs.
  using Backward = std::function<void(GradTape&, const Tensor<Scalar>& output_grad)>;

  /// A value that needs no gradient.
  Var constant(Tensor<Scalar> value) { return push(Node{std::move(value), nullptr, nullptr, {}, {}, false}); }

  /// A leaf whose gradient is kept on the tape (see grad()).
  Var input(Tensor<Scalar> value) { return push(Node{std::move(value), nullptr, nullptr, {}, {}, true}); }

  /// A leaf bound to an external tensor. Its gradient is added into
  /// `param.grad()` during backward(); the tensor must outlive the tape.
  Var parameter(Tensor<Scalar>& param) { return push(Node{{}, &param, &param, {}, {}, true}); }

  /// Records an op output. The backward closure is kept only when some input
  /// requires a gradient.
  Var record(Tensor<Scalar> value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }
  Var record(Tensor<Scalar> value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    Node node{std::move(value), nullptr, nullptr, {}, {}, needs};
    if (needs) node.backward = std::move(backward);
    return push(std::move(node));
  }

  const Tensor<Scalar>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Adds `g` into the gradient slot of `v`; no-op when `v` needs no gradient.
  void accumulate(Var v, const Tensor<Scalar>& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    require(g.shape() == value(v).shape(),
            "GradTape: gradient shape " + g.shape().str() + " does not match value " + value(v).shape().str());
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      n.grad.array() += g.array();
    }
  }
  void accumulate(Var v, Tensor<Scalar>&& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    require(g.shape() == value(v).shape(),
            "GradTape: gradient shape " + g.shape().str() + " does not match value " + value(v).shape().str());
    if (n.grad.empty()) {
      n.grad = std::move(g);
    } else {
      n.grad.array() += g.array();
    }
  }

  /// Reverse sweep seeded with d(root) = 1; root must hold one element.
  void backward(Var root) {
    require(value(root).size() == 1, "GradTape::backward: root must be a scalar, got " + value(root).shape().str());
    backward(root, Tensor<Scalar>(value(root).shape(), Scalar(1)));
  }

  /// Reverse sweep seeded with an explicit output gradient. Each node is
  /// visited exactly once, from the root back to the first record.
  void backward(Var root, const Tensor<Scalar>& seed) {
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
      } else if (n.param != nullptr) {
        n.param->ensure_grad();
        auto dst = n.param->grad();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  /// Gradient accumulated on the tape for `v`; empty if none reached it.
  const Tensor<Scalar>& grad(Var v) const { return nodes_.at(v.id).grad; }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

private:
  struct Node {
    Tensor<Scalar> value;
    const Tensor<Scalar>* ref;
    Tensor<Scalar>* param;
    Tensor<Scalar> grad;
    Backward backward;
    bool requires_grad;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Name plus pointer to a tensor owned by a block. Trainable entries receive
/// gradients; the rest are state buffers (batch-norm running statistics).
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor = nullptr;
  bool trainable = true;
};

template <typename Scalar>
using ParamList = std::vector<NamedTensor<Scalar>>;

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params) {
  for (const auto& p : params) {
    if (!p.trainable) continue;
    p.tensor->ensure_grad();
    p.tensor->zero_grad();
  }
}

}  // namespace mgil
