#pragma once

#include "scenectx/diffcore/graph.hpp"
#include "scenectx/fusion/fusion.hpp"
#include "scenectx/global_encoder/pooling.hpp"
#include "scenectx/nn/layers.hpp"
#include "scenectx/recognizers/vocab.hpp"

#include <json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace scenectx::rec {

using diff::Graph;
using diff::ModelState;
using diff::Var;

enum class Arch { ar, vit };
enum class IntegrationPoint { vision, contextual, decoder };

std::string to_string(Arch a);
std::string to_string(IntegrationPoint p);
Arch parse_arch(const std::string& s);
IntegrationPoint parse_point(const std::string& s);

/// ar: 3x3 conv (16 ch) -> 8x4/stride (8,4) conv to d_local tokens (vision),
/// BiLSTM + projection (contextual), attention LSTM decoder (decoder).
/// vit: 8x8 patch embedding + max_len position queries, pre-LN encoder,
/// per-position linear head.
struct RecognizerConfig {
  Arch arch = Arch::ar;
  Index d_local = 48;
  Index max_len = 8;  // L_max, EOS included
  Index crop_h = 8;
  Index max_crop_w = 64;
  Index conv_channels = 16;
  Index embed = 16;
  Index vit_layers = 2;
  Index vit_heads = 4;
  Index vit_mlp = 96;
  Index patch = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static RecognizerConfig from_json(const nlohmann::json& j);
};

/// A fusion attachment: mechanism, pooling, site and fine-tune rate.
struct ClipterConfig {
  fusion::FusionConfig fusion = fusion::FusionConfig::gated(48, 64);
  IntegrationPoint point = IntegrationPoint::vision;
  encoder::PoolKernel pool = encoder::PoolKernel::infinite();
  double lr = 2e-5;

  /// Throws ConfigError for sites the architecture lacks or width mismatches.
  void validate(const RecognizerConfig& rec) const;
  nlohmann::json to_json() const;  // mechanism, preset, pool_k, integration_point, lr, ...
  static ClipterConfig from_json(const nlohmann::json& j);
};

struct ModelSpec {
  RecognizerConfig rec;
  std::optional<ClipterConfig> clipter;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

inline constexpr const char* kFusionPrefix = "clipter";

/// Registers rec.* parameters.
void add_recognizer(ModelState& state, const RecognizerConfig& config, nn::Rng& rng);
/// Registers clipter.* parameters with alpha = 0.
void attach_clipter(ModelState& state, const ModelSpec& spec, nn::Rng& rng);

/// Fusion invocation counts per integration point (one per crop per call).
struct RecognizerProbe {
  std::array<std::size_t, 3> calls{};
  std::size_t at(IntegrationPoint p) const { return calls[static_cast<std::size_t>(p)]; }
  std::size_t total() const { return calls[0] + calls[1] + calls[2]; }
};

enum class DecodeMode { teacher, greedy };

struct ForwardRequest {
  std::vector<const MatF*> crops;    // crop_h x w, equal widths within a batch
  std::vector<const MatF*> globals;  // pooled global features per crop (clipter only)
  DecodeMode mode = DecodeMode::greedy;
  std::vector<std::vector<int>> targets;  // teacher mode: target_ids per crop
  Index max_steps = 0;                    // ar greedy step cap, 0 = max_len
  RecognizerProbe* probe = nullptr;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;  // (steps * B) x kOutputClasses, row t*B + b
  Index steps = 0;
  Index batch = 0;
};

template <typename T>
ForwardResult<T> recognize(Graph<T>& g, const ModelSpec& spec, const ForwardRequest& req);

/// Letters followed by EOS, padded with -1 (ignored) up to max_len.
std::vector<int> target_ids(const std::string& word, Index max_len);

struct Transcript {
  std::vector<int> ids;  // letters only, EOS excluded
  std::string text;
};

/// Argmax per step (ties to the lowest index), stopping at EOS or L_max.
Transcript decode_greedy(const MatF& logits, Index max_len);
/// Row block of item b from a batched logits matrix.
MatF item_logits(const MatF& logits, Index steps, Index batch, Index b);

/// Inference convenience: greedy transcripts for a batch of crops.
std::vector<Transcript> read_crops(const ModelState& state, const ModelSpec& spec, const std::vector<const MatF*>& crops,
                                   const std::vector<const MatF*>& globals, RecognizerProbe* probe = nullptr);

}  // namespace scenectx::rec
