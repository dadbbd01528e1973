#pragma once

#include "scenectx/diffcore/graph.hpp"
#include "scenectx/diffcore/ops.hpp"
#include "scenectx/diffcore/params.hpp"

#include <random>
#include <string>
#include <vector>

// Parameterized building blocks shared by the encoder, the recognizers and
// the fusion blocks. Each block has an `add_*` function registering its
// parameters under a name prefix and a forward function reading them back
// from the graph's bound parameter set.

namespace scenectx::nn {

using diff::Graph;
using diff::ModelState;
using diff::Var;
using Rng = std::mt19937_64;

void add_linear(ModelState& state, const std::string& prefix, Index in, Index out, Rng& rng, bool frozen = false);
template <typename T>
Var<T> linear(Graph<T>& g, const std::string& prefix, Var<T> x);

void add_layer_norm(ModelState& state, const std::string& prefix, Index dim, bool frozen = false);
template <typename T>
Var<T> layer_norm(Graph<T>& g, const std::string& prefix, Var<T> x);

/// q/k/v/o projections: queries from query_dim, keys and values from kv_dim,
/// all projected to hidden; output projected back to out_dim.
void add_attention(ModelState& state, const std::string& prefix, Index query_dim, Index kv_dim, Index hidden,
                   Index out_dim, Rng& rng, bool frozen = false);

/// Attention weights captured per head, each holding one matrix per group.
template <typename T>
using AttentionMaps = std::vector<std::vector<Mat<T>>>;

template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const std::string& prefix, Var<T> queries, Var<T> keys_values, Index heads,
                            Index groups, AttentionMaps<T>* maps = nullptr);

void add_lstm(ModelState& state, const std::string& prefix, Index in, Index hidden, Rng& rng, bool frozen = false);

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

template <typename T>
LstmState<T> lstm_step(Graph<T>& g, const std::string& prefix, Var<T> x, LstmState<T> prev);

/// Bidirectional pass over an interleaved sequence ((steps*batch) x in).
/// Output is ((steps*batch) x 2*hidden), forward half first.
template <typename T>
Var<T> bidirectional_lstm(Graph<T>& g, const std::string& prefix, Var<T> seq, Index batch, Index hidden);

/// Pre-norm self-attention encoder layer with a GELU feed-forward.
void add_encoder_layer(ModelState& state, const std::string& prefix, Index dim, Index mlp, Rng& rng,
                       bool frozen = false);
template <typename T>
Var<T> encoder_layer(Graph<T>& g, const std::string& prefix, Var<T> x, Index heads, Index groups);

}  // namespace scenectx::nn
