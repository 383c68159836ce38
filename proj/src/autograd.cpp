#include "stylefed/autograd.hpp"

#include <unordered_set>

#include "stylefed/errors.hpp"

namespace stylefed {

Tensor& detail::Node::grad_buffer() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::scalar() const {
  if (value().size() != 1) throw ShapeError("scalar() on non-1x1 value " + value().shape_string());
  return value()[0];
}

Var Var::make(Tensor value, std::vector<Var> parents, std::function<void(detail::Node&)> backward) {
  Var out(std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward = std::move(backward);
  return out;
}

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must be 1x1, got " + root.value().shape_string());
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are transient; leaves accumulate.
  for (auto* n : order) {
    if (n->backward) n->grad = Tensor(n->value.shape(), 0.0);
  }
  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (auto* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

DifferentiableParam::DifferentiableParam(Tensor value, bool trainable) : var_(std::move(value), trainable) {}

DifferentiableParam::DifferentiableParam(const DifferentiableParam& other) {
  if (other.var_.valid()) {
    var_ = Var(other.value(), other.trainable());
    var_.node().grad = other.var_.node().grad;
  }
}

DifferentiableParam& DifferentiableParam::operator=(const DifferentiableParam& other) {
  if (this != &other) *this = DifferentiableParam(other);
  return *this;
}

void DifferentiableParam::zero_grad() { var_.node().grad = Tensor(value().shape(), 0.0); }

void zero_grad(const ParamRefs& params) {
  for (auto* p : params) p->zero_grad();
}

void sgd_step(const ParamRefs& params, double lr) {
  for (auto* p : params) {
    if (!p->trainable()) continue;
    auto v = p->mutable_value().data();
    auto g = p->grad().data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

}  // namespace stylefed
