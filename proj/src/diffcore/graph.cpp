#include "scenectx/diffcore/graph.hpp"

#include <cmath>

namespace scenectx::diff {

template <typename T>
Var<T> Graph<T>::push(const char* op, Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = op;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::constant(Matrix value) {
  if (!value.allFinite()) throw NumericError("constant");
  return push("constant", std::move(value), false, nullptr);
}

template <typename T>
Var<T> Graph<T>::variable(Matrix value) {
  if (!value.allFinite()) throw NumericError("variable");
  return push("variable", std::move(value), grad_enabled_, nullptr);
}

template <typename T>
Var<T> Graph<T>::param(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return Var<T>{this, it->second};
  if (params_ == nullptr) throw std::logic_error("graph has no parameter set bound");
  const auto& p = params_->at(name);
  if (!p.value.allFinite()) throw NumericError("param:" + name);
  auto v = push("param", p.value, grad_enabled_ && !p.frozen, nullptr);
  bound_.emplace(name, v.id);
  return v;
}

template <typename T>
Var<T> Graph<T>::record(const char* op, Matrix value, std::initializer_list<int> parents, Backward backward) {
  return record(op, std::move(value), std::vector<int>(parents), std::move(backward));
}

template <typename T>
Var<T> Graph<T>::record(const char* op, Matrix value, const std::vector<int>& parents, Backward backward) {
  if (!value.allFinite()) throw NumericError(op);
  bool needs = false;
  if (grad_enabled_) {
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
  }
  return push(op, std::move(value), needs, std::move(backward));
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw std::logic_error("loss belongs to another graph");
  auto& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ShapeError("backward requires a 1x1 loss, got " + shape_str(root.value));
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    if (!n.grad.allFinite()) throw NumericError(std::string("backward:") + n.op);
    n.backward(*this, id);
  }
}

template <typename T>
std::map<std::string, typename Graph<T>::Matrix> Graph<T>::parameter_grads() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, id] : bound_) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) continue;
    out.emplace(name, n.grad.size() == 0 ? Matrix::Zero(n.value.rows(), n.value.cols()) : n.grad);
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace scenectx::diff
