#pragma once

#include "scenectx/diffcore/params.hpp"
#include "scenectx/diffcore/tensor.hpp"

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace scenectx::diff {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Mat<T>& value() const { return graph->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// creation order is a valid topological order for backpropagation.
///
/// Parameters are bound by name from an optional ParameterSet; binding the
/// same name twice returns the same node so that recurrent use accumulates
/// into one gradient. Frozen parameters are bound as constants and never
/// receive a gradient.
template <typename T>
class Graph {
 public:
  using Matrix = Mat<T>;
  using Backward = std::function<void(Graph&, int)>;

  explicit Graph(const ParameterSet<T>* params = nullptr) : params_(params) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Matrix value);
  /// Unnamed leaf that receives a gradient (used for input sensitivities).
  Var<T> variable(Matrix value);
  Var<T> param(const std::string& name);

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1.
  void backward(Var<T> loss);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  /// Empty matrix when the node received no gradient.
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradients for every non-frozen bound parameter that lies on a path to
  /// the loss. Parameters with no path get a zero matrix.
  std::map<std::string, Matrix> parameter_grads() const;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t node_count() const { return nodes_.size(); }
  const ParameterSet<T>* params() const { return params_; }

  /// Used by op implementations. Validates finiteness and wires the backward
  /// closure when any parent requires a gradient.
  Var<T> record(const char* op, Matrix value, std::initializer_list<int> parents, Backward backward);
  Var<T> record(const char* op, Matrix value, const std::vector<int>& parents, Backward backward);

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Zero-initialized (on first use) gradient storage of a node, or nullptr
  /// when the node does not take gradients.
  Matrix* grad_buffer(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  /// Gradient flowing into a node during backward (never empty when called
  /// from that node's own closure).
  const Matrix& incoming(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    const char* op = "";
    Backward backward;
  };

  Var<T> push(const char* op, Matrix value, bool requires_grad, Backward backward);

  const ParameterSet<T>* params_ = nullptr;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> bound_;
  bool grad_enabled_ = true;
};

/// Disables gradient recording for the lifetime of the guard.
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph<T>& g) : g_(g), prev_(g.grad_enabled()) { g_.set_grad_enabled(false); }
  ~NoGradGuard() { g_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph<T>& g_;
  bool prev_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace scenectx::diff
