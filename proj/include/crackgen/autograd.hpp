#pragma once

#include "crackgen/tensor.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace crackgen {

/// Handle to a node in a Graph. Negative id means "absent".
struct Var {
  int id = -1;
  explicit operator bool() const { return id >= 0; }
};

/// Reverse-mode tape over channel-major tensors. Nodes are appended in
/// evaluation order; backward() walks them in reverse.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat&)>;

  Var constant(Tensor<Scalar> value) { return push(std::move(value), false, {}, nullptr); }

  Var constant(Mat value) {
    const Index cols = value.cols();
    return push(Tensor<Scalar>(std::move(value), 1, cols), false, {}, nullptr);
  }

  /// Leaf bound to a parameter. When `sink` is non-null its gradient is added
  /// there after backward(); otherwise the leaf is treated as frozen.
  Var parameter(const Mat& value, Mat* sink) {
    return push(Tensor<Scalar>(value, 1, value.cols()), sink != nullptr, {}, sink);
  }

  Var record(Tensor<Scalar> value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : BackwardFn{},
                nullptr);
  }

  const Tensor<Scalar>& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Mat& data(Var v) const { return value(v).data; }
  bool requires_grad(Var v) const { return v && nodes_[static_cast<size_t>(v.id)].requires_grad; }
  Scalar scalar(Var v) const { return value(v).data(0, 0); }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    if (!requires_grad(v)) return;
    Mat& grad = nodes_[static_cast<size_t>(v.id)].grad;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }

  const Mat& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward(Var root) {
    Node& r = nodes_[static_cast<size_t>(root.id)];
    if (!r.requires_grad) return;
    r.grad = Mat::Ones(r.value.data.rows(), r.value.data.cols());
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.sink) *n.sink += n.grad;
      if (!n.sink) n.grad.resize(0, 0);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
    Mat* sink = nullptr;
  };

  Var push(Tensor<Scalar> value, bool requires_grad, BackwardFn backward, Mat* sink) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward), sink});
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

}  // namespace crackgen
