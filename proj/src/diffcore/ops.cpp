#include "scenectx/diffcore/ops.hpp"

#include <algorithm>
#include <cmath>

namespace scenectx::diff {
namespace {

template <typename T>
Graph<T>& graph_of(Var<T> a) {
  if (!a.valid()) throw std::logic_error("invalid Var");
  return *a.graph;
}

template <typename T>
Graph<T>& graph_of(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw std::logic_error("operands belong to different graphs");
  return graph_of(a);
}

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
}

// Strided view over the rows of one group in the interleaved layout.
template <typename T>
using GroupView = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using GroupViewMut = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
GroupView<T> group_rows(const Mat<T>& m, Index groups, Index g) {
  return GroupView<T>(m.data() + g * m.cols(), m.rows() / groups, m.cols(), Eigen::OuterStride<>(groups * m.cols()));
}

template <typename T>
GroupViewMut<T> group_rows(Mat<T>& m, Index groups, Index g) {
  return GroupViewMut<T>(m.data() + g * m.cols(), m.rows() / groups, m.cols(), Eigen::OuterStride<>(groups * m.cols()));
}

template <typename T>
Mat<T> row_softmax(const Mat<T>& x) {
  Mat<T> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b);
  require_same_shape("add", a, b);
  const int ia = a.id, ib = b.id;
  return g.record("add", a.value() + b.value(), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    gr.accumulate(ia, gr.incoming(self));
    gr.accumulate(ib, gr.incoming(self));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b);
  require_same_shape("sub", a, b);
  const int ia = a.id, ib = b.id;
  return g.record("sub", a.value() - b.value(), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    gr.accumulate(ia, gr.incoming(self));
    gr.accumulate(ib, -gr.incoming(self));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b);
  require_same_shape("mul", a, b);
  const int ia = a.id, ib = b.id;
  Mat<T> out = a.value().cwiseProduct(b.value());
  return g.record("mul", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go.cwiseProduct(gr.value(ib)));
    if (gr.requires_grad(ib)) gr.accumulate(ib, go.cwiseProduct(gr.value(ia)));
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  auto& g = graph_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " + shape_str(row.value()));
  }
  const int ia = a.id, ir = row.id;
  Mat<T> out = a.value().rowwise() + row.value().row(0);
  return g.record("add_row", std::move(out), {ia, ir}, [ia, ir](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    gr.accumulate(ia, go);
    if (gr.requires_grad(ir)) gr.accumulate(ir, go.colwise().sum());
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto& g = graph_of(a);
  const int ia = a.id;
  return g.record("scale", a.value() * s, {ia}, [ia, s](Graph<T>& gr, int self) {
    gr.accumulate(ia, gr.incoming(self) * s);
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = a.value().array() + s;
  return g.record("add_scalar", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    gr.accumulate(ia, gr.incoming(self));
  });
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = T(1) - a.value().array();
  return g.record("one_minus", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    gr.accumulate(ia, -gr.incoming(self));
  });
}

template <typename T>
Var<T> scalar_mul(Var<T> s, Var<T> a) {
  auto& g = graph_of(s, a);
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scalar_mul: scalar must be 1x1, got " + shape_str(s.value()));
  const int is = s.id, ia = a.id;
  Mat<T> out = s.value()(0, 0) * a.value();
  return g.record("scalar_mul", std::move(out), {is, ia}, [is, ia](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    if (gr.requires_grad(is)) {
      Mat<T> ds(1, 1);
      ds(0, 0) = go.cwiseProduct(gr.value(ia)).sum();
      gr.accumulate(is, ds);
    }
    if (gr.requires_grad(ia)) gr.accumulate(ia, go * gr.value(is)(0, 0));
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  const int ia = a.id, ib = b.id;
  Mat<T> out = a.value() * b.value();
  return g.record("matmul", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * go);
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.value()) + " * (" + shape_str(b.value()) + ")^T");
  }
  const int ia = a.id, ib = b.id;
  Mat<T> out = a.value() * b.value().transpose();
  return g.record("matmul_nt", std::move(out), {ia, ib}, [ia, ib](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    if (gr.requires_grad(ia)) gr.accumulate(ia, go * gr.value(ib));
    if (gr.requires_grad(ib)) gr.accumulate(ib, go.transpose() * gr.value(ia));
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  auto& g = graph_of(x, weight);
  if (bias.graph != x.graph) throw std::logic_error("linear: bias from another graph");
  if (x.cols() != weight.cols() || bias.rows() != 1 || bias.cols() != weight.rows()) {
    throw ShapeError("linear: x " + shape_str(x.value()) + ", W " + shape_str(weight.value()) + ", b " +
                     shape_str(bias.value()));
  }
  const int ix = x.id, iw = weight.id, ib = bias.id;
  Mat<T> out = x.value() * weight.value().transpose();
  out.rowwise() += bias.value().row(0);
  return g.record("linear", std::move(out), {ix, iw, ib}, [ix, iw, ib](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    if (gr.requires_grad(ix)) gr.accumulate(ix, go * gr.value(iw));
    if (gr.requires_grad(iw)) gr.accumulate(iw, go.transpose() * gr.value(ix));
    if (gr.requires_grad(ib)) gr.accumulate(ib, go.colwise().sum());
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = a.value().transpose();
  return g.record("transpose", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    gr.accumulate(ia, gr.incoming(self).transpose());
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = a.value().array().tanh();
  return g.record("tanh", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& y = gr.value(self);
    gr.accumulate(ia, (gr.incoming(self).array() * (T(1) - y.array().square())).matrix());
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = (T(1) + (-a.value().array()).exp()).inverse();
  return g.record("sigmoid", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& y = gr.value(self);
    gr.accumulate(ia, (gr.incoming(self).array() * y.array() * (T(1) - y.array())).matrix());
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out = a.value().cwiseMax(T(0));
  return g.record("relu", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& x = gr.value(ia);
    gr.accumulate(ia, (gr.incoming(self).array() * (x.array() > T(0)).template cast<T>()).matrix());
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Mat<T> out = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  return g.record("gelu", std::move(out), {ia}, [ia, inv_sqrt2](Graph<T>& gr, int self) {
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    Mat<T> d = gr.value(ia).unaryExpr([&](T x) {
      return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
    });
    gr.accumulate(ia, gr.incoming(self).cwiseProduct(d));
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  return g.record("softmax_rows", row_softmax(a.value()), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& y = gr.value(self);
    const auto& go = gr.incoming(self);
    Mat<T> dot = go.cwiseProduct(y).rowwise().sum();
    Mat<T> dx = y.cwiseProduct(go - dot.replicate(1, go.cols()));
    gr.accumulate(ia, dx);
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  const auto& x = a.value();
  Mat<T> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return g.record("log_softmax_rows", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& y = gr.value(self);
    const auto& go = gr.incoming(self);
    Mat<T> sums = go.rowwise().sum();
    Mat<T> dx = go - (y.array().exp() * sums.replicate(1, go.cols()).array()).matrix();
    gr.accumulate(ia, dx);
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  auto& g = graph_of(x, gamma);
  if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 || beta.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain/shift must be 1x" + std::to_string(x.cols()));
  }
  const auto& xv = x.value();
  const Index n = xv.cols();
  Mat<T> xhat(xv.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
  }
  Mat<T> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id, igm = gamma.id, ibt = beta.id;
  return g.record("layer_norm", std::move(out), {ix, igm, ibt},
                  [ix, igm, ibt, xhat = std::move(xhat), rstd = std::move(rstd), n](Graph<T>& gr, int self) {
                    const auto& go = gr.incoming(self);
                    if (gr.requires_grad(igm)) gr.accumulate(igm, go.cwiseProduct(xhat).colwise().sum());
                    if (gr.requires_grad(ibt)) gr.accumulate(ibt, go.colwise().sum());
                    if (!gr.requires_grad(ix)) return;
                    Mat<T> dxhat = go.array().rowwise() * gr.value(igm).row(0).array();
                    Mat<T> dx(go.rows(), n);
                    for (Index r = 0; r < go.rows(); ++r) {
                      const T m1 = dxhat.row(r).mean();
                      const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * rstd(r);
                    }
                    gr.accumulate(ix, dx);
                  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto& g = graph_of(parts.front());
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.graph != &g) throw std::logic_error("concat_cols: mixed graphs");
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Mat<T> out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return g.record("concat_cols", std::move(out), ids, [ids, widths](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    Index c0 = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (gr.requires_grad(ids[i])) gr.accumulate(ids[i], go.middleCols(c0, widths[i]));
      c0 += widths[i];
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto& g = graph_of(parts.front());
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> heights;
  for (const auto& p : parts) {
    if (p.graph != &g) throw std::logic_error("concat_rows: mixed graphs");
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    ids.push_back(p.id);
    heights.push_back(p.rows());
  }
  Mat<T> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return g.record("concat_rows", std::move(out), ids, [ids, heights](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    Index r0 = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (gr.requires_grad(ids[i])) gr.accumulate(ids[i], go.middleRows(r0, heights[i]));
      r0 += heights[i];
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Index start, Index count) {
  auto& g = graph_of(a);
  if (start < 0 || count <= 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     shape_str(a.value()));
  }
  const int ia = a.id;
  Mat<T> out = a.value().middleRows(start, count);
  return g.record("slice_rows", std::move(out), {ia}, [ia, start, count](Graph<T>& gr, int self) {
    if (auto* buf = gr.grad_buffer(ia)) buf->middleRows(start, count) += gr.incoming(self);
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Index start, Index count) {
  auto& g = graph_of(a);
  if (start < 0 || count <= 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     shape_str(a.value()));
  }
  const int ia = a.id;
  Mat<T> out = a.value().middleCols(start, count);
  return g.record("slice_cols", std::move(out), {ia}, [ia, start, count](Graph<T>& gr, int self) {
    if (auto* buf = gr.grad_buffer(ia)) buf->middleCols(start, count) += gr.incoming(self);
  });
}

template <typename T>
Var<T> tile_rows(Var<T> a, Index times) {
  auto& g = graph_of(a);
  if (times <= 0) throw ShapeError("tile_rows: times must be positive");
  const int ia = a.id;
  const Index r = a.rows();
  Mat<T> out = a.value().replicate(times, 1);
  return g.record("tile_rows", std::move(out), {ia}, [ia, times, r](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    Mat<T> acc = go.topRows(r);
    for (Index t = 1; t < times; ++t) acc += go.middleRows(t * r, r);
    gr.accumulate(ia, acc);
  });
}

template <typename T>
Var<T> repeat_rows(Var<T> a, Index times) {
  auto& g = graph_of(a);
  if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
  const int ia = a.id;
  const auto& av = a.value();
  Mat<T> out(av.rows() * times, av.cols());
  for (Index r = 0; r < av.rows(); ++r) out.middleRows(r * times, times) = av.row(r).replicate(times, 1);
  return g.record("repeat_rows", std::move(out), {ia}, [ia, times](Graph<T>& gr, int self) {
    const auto& go = gr.incoming(self);
    Mat<T> acc(go.rows() / times, go.cols());
    for (Index r = 0; r < acc.rows(); ++r) acc.row(r) = go.middleRows(r * times, times).colwise().sum();
    gr.accumulate(ia, acc);
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, const std::vector<int>& indices) {
  auto& g = graph_of(a);
  const auto& av = a.value();
  Mat<T> out(static_cast<Index>(indices.size()), av.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= av.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of " + std::to_string(av.rows()));
    }
    out.row(static_cast<Index>(i)) = av.row(indices[i]);
  }
  const int ia = a.id;
  return g.record("gather_rows", std::move(out), {ia}, [ia, indices](Graph<T>& gr, int self) {
    auto* buf = gr.grad_buffer(ia);
    if (buf == nullptr) return;
    const auto& go = gr.incoming(self);
    for (std::size_t i = 0; i < indices.size(); ++i) buf->row(indices[i]) += go.row(static_cast<Index>(i));
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Index rows, Index cols) {
  auto& g = graph_of(a);
  if (rows * cols != a.value().size()) {
    throw ShapeError("reshape: " + shape_str(a.value()) + " -> " + shape_str(rows, cols));
  }
  const int ia = a.id;
  const Index r0 = a.rows(), c0 = a.cols();
  Mat<T> out = Eigen::Map<const Mat<T>>(a.value().data(), rows, cols);
  return g.record("reshape", std::move(out), {ia}, [ia, r0, c0](Graph<T>& gr, int self) {
    gr.accumulate(ia, Eigen::Map<const Mat<T>>(gr.incoming(self).data(), r0, c0));
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record("sum_all", std::move(out), {ia}, [ia](Graph<T>& gr, int self) {
    const auto& x = gr.value(ia);
    gr.accumulate(ia, Mat<T>::Constant(x.rows(), x.cols(), gr.incoming(self)(0, 0)));
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  auto& g = graph_of(a);
  const int ia = a.id;
  const T n = static_cast<T>(a.value().size());
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return g.record("mean_all", std::move(out), {ia}, [ia, n](Graph<T>& gr, int self) {
    const auto& x = gr.value(ia);
    gr.accumulate(ia, Mat<T>::Constant(x.rows(), x.cols(), gr.incoming(self)(0, 0) / n));
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> a, const Mat<T>& weights) {
  auto& g = graph_of(a);
  if (weights.rows() != a.rows() || weights.cols() != a.cols()) {
    throw ShapeError("weighted_sum: weights " + shape_str(weights) + " vs " + shape_str(a.value()));
  }
  const int ia = a.id;
  Mat<T> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(weights).sum();
  return g.record("weighted_sum", std::move(out), {ia}, [ia, weights](Graph<T>& gr, int self) {
    gr.accumulate(ia, weights * gr.incoming(self)(0, 0));
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, int ignore_index) {
  auto& g = graph_of(logits);
  const auto& x = logits.value();
  if (static_cast<Index>(targets.size()) != x.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(x));
  }
  Mat<T> probs = row_softmax(x);
  T total = 0;
  Index counted = 0;
  for (Index r = 0; r < x.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= x.cols()) throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    total += lse - x(r, t);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  Mat<T> out(1, 1);
  out(0, 0) = total / static_cast<T>(counted);
  const int il = logits.id;
  return g.record("cross_entropy", std::move(out), {il},
                  [il, targets, ignore_index, counted, probs = std::move(probs)](Graph<T>& gr, int self) {
                    const T scale_by = gr.incoming(self)(0, 0) / static_cast<T>(counted);
                    Mat<T> d = probs;
                    for (Index r = 0; r < d.rows(); ++r) {
                      const int t = targets[static_cast<std::size_t>(r)];
                      if (t == ignore_index) {
                        d.row(r).setZero();
                      } else {
                        d(r, t) -= T(1);
                      }
                    }
                    gr.accumulate(il, d * scale_by);
                  });
}

template <typename T>
Var<T> im2col(Var<T> x, const ConvGeometry& geo) {
  auto& g = graph_of(x);
  const Index B = geo.batch, H = geo.height, W = geo.width, C = geo.channels;
  if (x.rows() != H * W * B || x.cols() != C) {
    throw ShapeError("im2col: expected " + shape_str(H * W * B, C) + " input, got " + shape_str(x.value()));
  }
  const Index OH = geo.out_height(), OW = geo.out_width();
  if (OH <= 0 || OW <= 0) throw ShapeError("im2col: kernel larger than padded input");
  const Index K = geo.kernel_h * geo.kernel_w * C;
  const auto& xv = x.value();
  Mat<T> out = Mat<T>::Zero(OH * OW * B, K);
  for (Index oy = 0; oy < OH; ++oy) {
    for (Index ox = 0; ox < OW; ++ox) {
      for (Index ky = 0; ky < geo.kernel_h; ++ky) {
        const Index iy = oy * geo.stride_h - geo.pad_h + ky;
        if (iy < 0 || iy >= H) continue;
        for (Index kx = 0; kx < geo.kernel_w; ++kx) {
          const Index ix = ox * geo.stride_w - geo.pad_w + kx;
          if (ix < 0 || ix >= W) continue;
          const Index col = (ky * geo.kernel_w + kx) * C;
          out.block((oy * OW + ox) * B, col, B, C) = xv.block((iy * W + ix) * B, 0, B, C);
        }
      }
    }
  }
  const int ixd = x.id;
  return g.record("im2col", std::move(out), {ixd}, [ixd, geo, OH, OW](Graph<T>& gr, int self) {
    auto* buf = gr.grad_buffer(ixd);
    if (buf == nullptr) return;
    const auto& go = gr.incoming(self);
    const Index B = geo.batch, H = geo.height, W = geo.width, C = geo.channels;
    for (Index oy = 0; oy < OH; ++oy) {
      for (Index ox = 0; ox < OW; ++ox) {
        for (Index ky = 0; ky < geo.kernel_h; ++ky) {
          const Index iy = oy * geo.stride_h - geo.pad_h + ky;
          if (iy < 0 || iy >= H) continue;
          for (Index kx = 0; kx < geo.kernel_w; ++kx) {
            const Index ix = ox * geo.stride_w - geo.pad_w + kx;
            if (ix < 0 || ix >= W) continue;
            const Index col = (ky * geo.kernel_w + kx) * C;
            buf->block((iy * W + ix) * B, 0, B, C) += go.block((oy * OW + ox) * B, col, B, C);
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> avg_pool(Var<T> x, Index batch, Index height, Index width, Index kernel_h, Index kernel_w) {
  auto& g = graph_of(x);
  if (x.rows() != batch * height * width) throw ShapeError("avg_pool: row count does not match geometry");
  if (kernel_h <= 0 || kernel_w <= 0 || height % kernel_h != 0 || width % kernel_w != 0) {
    throw ShapeError("avg_pool: kernel must divide the grid");
  }
  const Index OH = height / kernel_h, OW = width / kernel_w, C = x.cols();
  const T inv = T(1) / static_cast<T>(kernel_h * kernel_w);
  const auto& xv = x.value();
  Mat<T> out = Mat<T>::Zero(OH * OW * batch, C);
  for (Index oy = 0; oy < OH; ++oy) {
    for (Index ox = 0; ox < OW; ++ox) {
      auto dst = out.block((oy * OW + ox) * batch, 0, batch, C);
      for (Index ky = 0; ky < kernel_h; ++ky) {
        for (Index kx = 0; kx < kernel_w; ++kx) {
          dst += xv.block(((oy * kernel_h + ky) * width + ox * kernel_w + kx) * batch, 0, batch, C);
        }
      }
      dst *= inv;
    }
  }
  const int ixd = x.id;
  return g.record("avg_pool", std::move(out), {ixd},
                  [ixd, batch, width, kernel_h, kernel_w, OH, OW, C, inv](Graph<T>& gr, int self) {
                    auto* buf = gr.grad_buffer(ixd);
                    if (buf == nullptr) return;
                    const auto& go = gr.incoming(self);
                    for (Index oy = 0; oy < OH; ++oy) {
                      for (Index ox = 0; ox < OW; ++ox) {
                        const auto src = go.block((oy * OW + ox) * batch, 0, batch, C);
                        for (Index ky = 0; ky < kernel_h; ++ky) {
                          for (Index kx = 0; kx < kernel_w; ++kx) {
                            buf->block(((oy * kernel_h + ky) * width + ox * kernel_w + kx) * batch, 0, batch, C) +=
                                src * inv;
                          }
                        }
                      }
                    }
                  });
}

template <typename T>
Var<T> grouped_attention(Var<T> q, Var<T> k, Var<T> v, Index groups, T scale,
                         std::vector<Mat<T>>* weights_out) {
  auto& g = graph_of(q, k);
  if (v.graph != q.graph) throw std::logic_error("grouped_attention: mixed graphs");
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0) {
    throw ShapeError("grouped_attention: rows not divisible by group count");
  }
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("grouped_attention: q " + shape_str(q.value()) + ", k " + shape_str(k.value()) + ", v " +
                     shape_str(v.value()));
  }
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  std::vector<Mat<T>> weights(static_cast<std::size_t>(groups));
  Mat<T> out(qv.rows(), vv.cols());
  for (Index gi = 0; gi < groups; ++gi) {
    Mat<T> scores = (group_rows(qv, groups, gi) * group_rows(kv, groups, gi).transpose()) * scale;
    auto& a = weights[static_cast<std::size_t>(gi)];
    a = row_softmax(scores);
    group_rows(out, groups, gi) = a * group_rows(vv, groups, gi);
  }
  if (weights_out != nullptr) *weights_out = weights;
  const int iq = q.id, ik = k.id, iv = v.id;
  return g.record("grouped_attention", std::move(out), {iq, ik, iv},
                  [iq, ik, iv, groups, scale, weights = std::move(weights)](Graph<T>& gr, int self) {
                    const auto& go = gr.incoming(self);
                    auto* dq = gr.grad_buffer(iq);
                    auto* dk = gr.grad_buffer(ik);
                    auto* dv = gr.grad_buffer(iv);
                    for (Index gi = 0; gi < groups; ++gi) {
                      const auto& a = weights[static_cast<std::size_t>(gi)];
                      const auto dout = group_rows(go, groups, gi);
                      if (dv != nullptr) group_rows(*dv, groups, gi) += a.transpose() * dout;
                      if (dq == nullptr && dk == nullptr) continue;
                      Mat<T> da = dout * group_rows(gr.value(iv), groups, gi).transpose();
                      Mat<T> dot = da.cwiseProduct(a).rowwise().sum();
                      Mat<T> ds = a.cwiseProduct(da - dot.replicate(1, da.cols())) * scale;
                      if (dq != nullptr) group_rows(*dq, groups, gi) += ds * group_rows(gr.value(ik), groups, gi);
                      if (dk != nullptr) group_rows(*dk, groups, gi) += ds.transpose() * group_rows(gr.value(iq), groups, gi);
                    }
                  });
}

#define SCENECTX_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                                \
  template Var<T> sub(Var<T>, Var<T>);                                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                                \
  template Var<T> add_row(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                                   \
  template Var<T> add_scalar(Var<T>, T);                                                              \
  template Var<T> one_minus(Var<T>);                                                                  \
  template Var<T> scalar_mul(Var<T>, Var<T>);                                                         \
  template Var<T> matmul(Var<T>, Var<T>);                                                             \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                          \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                     \
  template Var<T> transpose(Var<T>);                                                                  \
  template Var<T> tanh(Var<T>);                                                                       \
  template Var<T> sigmoid(Var<T>);                                                                    \
  template Var<T> relu(Var<T>);                                                                       \
  template Var<T> gelu(Var<T>);                                                                       \
  template Var<T> softmax_rows(Var<T>);                                                               \
  template Var<T> log_softmax_rows(Var<T>);                                                           \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                             \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                            \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                            \
  template Var<T> slice_rows(Var<T>, Index, Index);                                                   \
  template Var<T> slice_cols(Var<T>, Index, Index);                                                   \
  template Var<T> tile_rows(Var<T>, Index);                                                           \
  template Var<T> repeat_rows(Var<T>, Index);                                                         \
  template Var<T> gather_rows(Var<T>, const std::vector<int>&);                                       \
  template Var<T> reshape(Var<T>, Index, Index);                                                      \
  template Var<T> sum_all(Var<T>);                                                                    \
  template Var<T> mean_all(Var<T>);                                                                   \
  template Var<T> weighted_sum(Var<T>, const Mat<T>&);                                                \
  template Var<T> cross_entropy(Var<T>, const std::vector<int>&, int);                                \
  template Var<T> im2col(Var<T>, const ConvGeometry&);                                                \
  template Var<T> avg_pool(Var<T>, Index, Index, Index, Index, Index);                                \
  template Var<T> grouped_attention(Var<T>, Var<T>, Var<T>, Index, T, std::vector<Mat<T>>*);

SCENECTX_INSTANTIATE_OPS(float)
SCENECTX_INSTANTIATE_OPS(double)

}  // namespace scenectx::diff
