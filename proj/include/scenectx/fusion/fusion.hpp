#pragma once

#include "scenectx/diffcore/graph.hpp"
#include "scenectx/diffcore/params.hpp"
#include "scenectx/nn/layers.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace scenectx::fusion {

using diff::Graph;
using diff::ModelState;
using diff::Var;

enum class Mechanism { gated, mhca };
enum class Preset { none, tiny, mini, small };
enum class Role { global, local, mixed, fused };

std::string to_string(Mechanism m);
std::string to_string(Preset p);
Mechanism parse_mechanism(const std::string& s);
Preset parse_preset(const std::string& s);

/// N x d embeddings tagged with where they came from.
struct FeatureSequence {
  FeatureSequence() = default;
  FeatureSequence(MatF tokens, Role role);

  MatF tokens;
  Role role = Role::local;

  Index length() const { return tokens.rows(); }
  Index dim() const { return tokens.cols(); }
};

/// Fully determines a fusion attachment's architecture.
struct FusionConfig {
  Mechanism mechanism = Mechanism::gated;
  Preset preset = Preset::none;
  Index heads = 0;
  Index layers = 0;
  Index hidden_size = 0;
  Index intermediate_size = 0;
  Index d_local = 48;
  Index d_global = 64;

  static FusionConfig gated(Index d_local, Index d_global);
  /// tiny (2 heads, 2 layers, 128, 512), mini (4, 4, 256, 1024),
  /// small (8, 4, 512, 2048).
  static FusionConfig mhca(Preset preset, Index d_local, Index d_global);

  void validate() const;
  nlohmann::json to_json() const;
  static FusionConfig from_json(const nlohmann::json& j);
};

/// Fine-tuning learning rates per mechanism/preset before desk-scale scaling:
/// gated 2e-5, tiny 3e-5, mini 3e-5, small 1e-5.
double reference_learning_rate(const FusionConfig& config);

/// Instrumentation for exclusivity and per-step invocation counts. A fused
/// batch counts one invocation per item.
struct FusionProbe {
  std::size_t invocations = 0;
};

/// Registers projection, mixing block and the gate scalar (alpha = 0).
void add_fusion(ModelState& state, const FusionConfig& config, const std::string& prefix, nn::Rng& rng);

// Differentiable building blocks. Local sequences may carry `groups`
// interleaved batch items; the projected global sequence then carries the
// same number of groups.

template <typename T>
Var<T> project_global(Graph<T>& g, const std::string& prefix, Var<T> global);

/// Per local token: gate = softmax(W [f_local; f_global] + b) over the d
/// feature channels, mixed = gate .* f_local + (1 - gate) .* f_global.
/// Requires exactly one global token per group.
template <typename T>
Var<T> gated_attention(Var<T> local, Var<T> global, Var<T> weight, Var<T> bias, Index groups);

template <typename T>
Var<T> mhca_block(Graph<T>& g, const FusionConfig& config, const std::string& prefix, Var<T> local, Var<T> global,
                  Index groups, std::vector<nn::AttentionMaps<T>>* layer_maps = nullptr);

/// (1 - tanh(alpha)) * local + tanh(alpha) * mixed, alpha 1x1.
template <typename T>
Var<T> tanh_gate(Var<T> local, Var<T> mixed, Var<T> alpha);

/// Projection, mixing and gating in one call, reading parameters under prefix.
template <typename T>
Var<T> fuse(Graph<T>& g, const FusionConfig& config, const std::string& prefix, Var<T> local, Var<T> global_raw,
            Index groups, FusionProbe* probe = nullptr);

// Inference-only conveniences over FeatureSequence.

FeatureSequence project_global(const FeatureSequence& global, const MatF& weight, const MatF& bias);
FeatureSequence gated_attention(const FeatureSequence& local, const FeatureSequence& global, const MatF& weight,
                                const MatF& bias);
FeatureSequence mhca_block(const FeatureSequence& local, const FeatureSequence& global, const FusionConfig& config,
                           const ModelState& state, const std::string& prefix,
                           std::vector<nn::AttentionMaps<float>>* layer_maps = nullptr);
FeatureSequence tanh_gate(const FeatureSequence& local, const FeatureSequence& mixed, float alpha);

}  // namespace scenectx::fusion
