#include "scenectx/nn/layers.hpp"

#include <cmath>

namespace scenectx::nn {

using namespace scenectx::diff;

void add_linear(ModelState& state, const std::string& prefix, Index in, Index out, Rng& rng, bool frozen) {
  state.add(prefix + ".weight", xavier_init(out, in, rng), frozen);
  state.add(prefix + ".bias", MatF::Zero(1, out), frozen);
}

template <typename T>
Var<T> linear(Graph<T>& g, const std::string& prefix, Var<T> x) {
  return diff::linear(x, g.param(prefix + ".weight"), g.param(prefix + ".bias"));
}

void add_layer_norm(ModelState& state, const std::string& prefix, Index dim, bool frozen) {
  state.add(prefix + ".gain", MatF::Ones(1, dim), frozen);
  state.add(prefix + ".shift", MatF::Zero(1, dim), frozen);
}

template <typename T>
Var<T> layer_norm(Graph<T>& g, const std::string& prefix, Var<T> x) {
  return diff::layer_norm(x, g.param(prefix + ".gain"), g.param(prefix + ".shift"));
}

void add_attention(ModelState& state, const std::string& prefix, Index query_dim, Index kv_dim, Index hidden,
                   Index out_dim, Rng& rng, bool frozen) {
  add_linear(state, prefix + ".q", query_dim, hidden, rng, frozen);
  // No key bias: it shifts every score of a query row equally and so has no
  // effect on the attention weights.
  state.add(prefix + ".k.weight", xavier_init(hidden, kv_dim, rng), frozen);
  add_linear(state, prefix + ".v", kv_dim, hidden, rng, frozen);
  add_linear(state, prefix + ".o", hidden, out_dim, rng, frozen);
}

template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const std::string& prefix, Var<T> queries, Var<T> keys_values, Index heads,
                            Index groups, AttentionMaps<T>* maps) {
  Var<T> q = linear(g, prefix + ".q", queries);
  Var<T> k = matmul_nt(keys_values, g.param(prefix + ".k.weight"));
  Var<T> v = linear(g, prefix + ".v", keys_values);
  const Index hidden = q.cols();
  if (heads <= 0 || hidden % heads != 0) {
    throw ConfigError("attention hidden size " + std::to_string(hidden) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const Index head_dim = hidden / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  if (maps != nullptr) maps->assign(static_cast<std::size_t>(heads), {});
  Var<T> merged;
  if (heads == 1) {
    merged = grouped_attention(q, k, v, groups, scale, maps != nullptr ? &(*maps)[0] : nullptr);
  } else {
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (Index h = 0; h < heads; ++h) {
      auto* w = maps != nullptr ? &(*maps)[static_cast<std::size_t>(h)] : nullptr;
      outs.push_back(grouped_attention(slice_cols(q, h * head_dim, head_dim), slice_cols(k, h * head_dim, head_dim),
                                       slice_cols(v, h * head_dim, head_dim), groups, scale, w));
    }
    merged = concat_cols(outs);
  }
  return linear(g, prefix + ".o", merged);
}

void add_lstm(ModelState& state, const std::string& prefix, Index in, Index hidden, Rng& rng, bool frozen) {
  state.add(prefix + ".w_ih", xavier_init(4 * hidden, in, rng), frozen);
  state.add(prefix + ".w_hh", xavier_init(4 * hidden, hidden, rng), frozen);
  MatF bias = MatF::Zero(1, 4 * hidden);
  bias.middleCols(hidden, hidden).setOnes();  // forget gate
  state.add(prefix + ".bias", std::move(bias), frozen);
}

template <typename T>
LstmState<T> lstm_step(Graph<T>& g, const std::string& prefix, Var<T> x, LstmState<T> prev) {
  Var<T> gates = diff::linear(x, g.param(prefix + ".w_ih"), g.param(prefix + ".bias")) +
                 matmul_nt(prev.h, g.param(prefix + ".w_hh"));
  const Index H = prev.h.cols();
  Var<T> i = sigmoid(slice_cols(gates, 0, H));
  Var<T> f = sigmoid(slice_cols(gates, H, H));
  Var<T> c_hat = diff::tanh(slice_cols(gates, 2 * H, H));
  Var<T> o = sigmoid(slice_cols(gates, 3 * H, H));
  Var<T> c = f * prev.c + i * c_hat;
  Var<T> h = o * diff::tanh(c);
  return {h, c};
}

template <typename T>
Var<T> bidirectional_lstm(Graph<T>& g, const std::string& prefix, Var<T> seq, Index batch, Index hidden) {
  const Index steps = seq.rows() / batch;
  if (steps * batch != seq.rows()) throw ShapeError("bidirectional_lstm: rows not divisible by batch");
  std::vector<Var<T>> fw(static_cast<std::size_t>(steps));
  std::vector<Var<T>> bw(static_cast<std::size_t>(steps));
  const Var<T> zero = g.constant(Mat<T>::Zero(batch, hidden));
  LstmState<T> s{zero, zero};
  for (Index t = 0; t < steps; ++t) {
    s = lstm_step(g, prefix + ".fw", slice_rows(seq, t * batch, batch), s);
    fw[static_cast<std::size_t>(t)] = s.h;
  }
  s = {zero, zero};
  for (Index t = steps - 1; t >= 0; --t) {
    s = lstm_step(g, prefix + ".bw", slice_rows(seq, t * batch, batch), s);
    bw[static_cast<std::size_t>(t)] = s.h;
  }
  return concat_cols<T>({concat_rows(fw), concat_rows(bw)});
}

void add_encoder_layer(ModelState& state, const std::string& prefix, Index dim, Index mlp, Rng& rng, bool frozen) {
  add_layer_norm(state, prefix + ".ln1", dim, frozen);
  add_attention(state, prefix + ".attn", dim, dim, dim, dim, rng, frozen);
  add_layer_norm(state, prefix + ".ln2", dim, frozen);
  add_linear(state, prefix + ".fc1", dim, mlp, rng, frozen);
  add_linear(state, prefix + ".fc2", mlp, dim, rng, frozen);
}

template <typename T>
Var<T> encoder_layer(Graph<T>& g, const std::string& prefix, Var<T> x, Index heads, Index groups) {
  Var<T> h = layer_norm(g, prefix + ".ln1", x);
  x = x + multi_head_attention(g, prefix + ".attn", h, h, heads, groups);
  h = layer_norm(g, prefix + ".ln2", x);
  return x + linear(g, prefix + ".fc2", gelu(linear(g, prefix + ".fc1", h)));
}

#define SCENECTX_INSTANTIATE_LAYERS(T)                                                                 \
  template Var<T> linear(Graph<T>&, const std::string&, Var<T>);                                       \
  template Var<T> layer_norm(Graph<T>&, const std::string&, Var<T>);                                   \
  template Var<T> multi_head_attention(Graph<T>&, const std::string&, Var<T>, Var<T>, Index, Index,    \
                                       AttentionMaps<T>*);                                             \
  template LstmState<T> lstm_step(Graph<T>&, const std::string&, Var<T>, LstmState<T>);                \
  template Var<T> bidirectional_lstm(Graph<T>&, const std::string&, Var<T>, Index, Index);             \
  template Var<T> encoder_layer(Graph<T>&, const std::string&, Var<T>, Index, Index);

SCENECTX_INSTANTIATE_LAYERS(float)
SCENECTX_INSTANTIATE_LAYERS(double)

}  // namespace scenectx::nn
