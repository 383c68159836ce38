#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "stylefed/tensor.hpp"

namespace stylefed {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

}  // namespace detail

/// Handle to a value in a reverse-mode computation graph.
///
/// Graphs are built eagerly by the free functions in `ops.hpp`; calling
/// `backward(loss)` on a 1x1 result accumulates gradients into every
/// reachable leaf that requires them. A Var is cheap to copy (shared node).
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  /// Accumulated gradient; zero tensor of value's shape if none yet.
  const Tensor& grad() const { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const noexcept { return static_cast<bool>(node_); }

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Value of a 1x1 result.
  double scalar() const;

  /// Internal: creates a non-leaf node.
  static Var make(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  friend class DifferentiableParam;
  std::shared_ptr<detail::Node> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every ancestor.
void backward(const Var& root);

/// Trainable tensor: value, matching gradient and a trainable flag.
///
/// Copies are deep; two copies never share storage.
class DifferentiableParam {
 public:
  DifferentiableParam() = default;
  explicit DifferentiableParam(Tensor value, bool trainable = true);
  DifferentiableParam(const DifferentiableParam& other);
  DifferentiableParam& operator=(const DifferentiableParam& other);
  DifferentiableParam(DifferentiableParam&&) noexcept = default;
  DifferentiableParam& operator=(DifferentiableParam&&) noexcept = default;

  const Tensor& value() const { return var_.value(); }
  Tensor& mutable_value() { return var_.node().value; }
  const Tensor& grad() const { return var_.grad(); }
  bool trainable() const { return var_.requires_grad(); }
  void set_trainable(bool on) { var_.node().requires_grad = on; }

  void zero_grad();
  /// Leaf handle for use in a graph.
  const Var& var() const { return var_; }

 private:
  Var var_;
};

using ParamRefs = std::vector<DifferentiableParam*>;

void zero_grad(const ParamRefs& params);
/// Plain SGD: value -= lr * grad for trainable params.
void sgd_step(const ParamRefs& params, double lr);

}  // namespace stylefed
