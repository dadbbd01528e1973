#pragma once

#include "scenectx/diffcore/graph.hpp"

#include <vector>

// Differentiable op set. Every op validates shapes (ShapeError) and the
// finiteness of its result (NumericError naming the op).
//
// Batched feature maps and sequences use a batch-interleaved row layout:
// the row for position p of batch item b is p * batch + b. Under this layout
// slicing a block of `batch` rows selects one position for every item, and
// tile_rows broadcasts one row per item across all positions.

namespace scenectx::diff {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// a (r x c) + row (1 x c) broadcast over rows.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
/// 1 - a, elementwise.
template <typename T> Var<T> one_minus(Var<T> a);
/// s (1 x 1) times a.
template <typename T> Var<T> scalar_mul(Var<T> s, Var<T> a);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// a * b^T.
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
/// x * W^T + bias, with W stored (out x in) and bias (1 x out).
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
template <typename T> Var<T> transpose(Var<T> a);

template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
/// Exact (erf-based) GELU.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> log_softmax_rows(Var<T> a);
/// Per-row normalization with learnable gain and shift, both (1 x c).
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_rows(Var<T> a, Index start, Index count);
template <typename T> Var<T> slice_cols(Var<T> a, Index start, Index count);
/// Stacks `times` copies of a vertically (block repeat).
template <typename T> Var<T> tile_rows(Var<T> a, Index times);
/// Repeats every row `times` times consecutively (row r -> rows r*times..).
template <typename T> Var<T> repeat_rows(Var<T> a, Index times);
/// out.row(i) = a.row(indices[i]); gradient scatter-adds.
template <typename T> Var<T> gather_rows(Var<T> a, const std::vector<int>& indices);
/// Reinterprets row-major storage with a new shape.
template <typename T> Var<T> reshape(Var<T> a, Index rows, Index cols);

template <typename T> Var<T> sum_all(Var<T> a);
template <typename T> Var<T> mean_all(Var<T> a);
/// sum(a .* weights) for a constant weight matrix; the usual probe loss.
template <typename T> Var<T> weighted_sum(Var<T> a, const Mat<T>& weights);

/// Mean negative log-likelihood over rows whose target is not ignore_index.
/// Returns 1x1. Throws if no row is counted.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, int ignore_index = -1);

struct ConvGeometry {
  Index batch = 1;
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  Index kernel_h = 3;
  Index kernel_w = 3;
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 1;
  Index pad_w = 1;

  Index out_height() const { return (height + 2 * pad_h - kernel_h) / stride_h + 1; }
  Index out_width() const { return (width + 2 * pad_w - kernel_w) / stride_w + 1; }
};

/// Patch extraction for convolution. Input ((H*W*batch) x C), interleaved;
/// output ((H'*W'*batch) x (kh*kw*C)) with column order (ky, kx, c).
template <typename T> Var<T> im2col(Var<T> x, const ConvGeometry& geom);

/// Non-overlapping average pooling over an interleaved (H*W*batch) x C map.
template <typename T>
Var<T> avg_pool(Var<T> x, Index batch, Index height, Index width, Index kernel_h, Index kernel_w);

/// Scaled dot-product attention where rows are partitioned into `groups`
/// independent problems by row % groups (interleaved layout). q is
/// (nq*groups x dk), k is (nk*groups x dk), v is (nk*groups x dv).
/// When weights_out is non-null it receives one (nq x nk) row-stochastic
/// matrix per group.
template <typename T>
Var<T> grouped_attention(Var<T> q, Var<T> k, Var<T> v, Index groups, T scale,
                         std::vector<Mat<T>>* weights_out = nullptr);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace scenectx::diff
