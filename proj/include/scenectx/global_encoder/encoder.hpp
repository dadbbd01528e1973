#pragma once

#include "scenectx/datagen/dataset.hpp"
#include "scenectx/diffcore/graph.hpp"
#include "scenectx/diffcore/params.hpp"
#include "scenectx/nn/layers.hpp"
#include "scenectx/util/digest.hpp"

#include <json.hpp>

#include <atomic>
#include <vector>

namespace scenectx::encoder {

using diff::Graph;
using diff::ModelState;
using diff::Var;

/// Patch-embedding transformer with a class token.
struct EncoderConfig {
  Index image = data::kSceneSize;
  Index patch = 8;
  Index dim = 64;
  Index depth = 3;
  Index heads = 4;
  Index mlp = 128;
  Index classes = 4;  // pretraining head: scene context

  Index grid() const { return image / patch; }
  Index tokens() const { return 1 + grid() * grid(); }
  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

/// Registers encoder.* parameters (patch embedding, class token, positions,
/// layers, final norm, context head).
void add_encoder(ModelState& state, const EncoderConfig& config, nn::Rng& rng);

/// Interleaved token matrix ((1+HW)*B x dim) for B images; row p*B+b is
/// token p of image b, token 0 the class token. Throws ShapeError when an
/// image does not match the configured size.
template <typename T>
Var<T> encoder_tokens(Graph<T>& g, const EncoderConfig& config, const std::vector<const MatF*>& images);

/// Context logits (B x classes) read from the class tokens.
template <typename T>
Var<T> context_logits(Graph<T>& g, Var<T> tokens, Index batch);

struct GlobalFeatures {
  MatF tokens;  // (1 + H*W) x d, row 0 the class token, patches row-major
  Index grid_h = 0;
  Index grid_w = 0;
};

/// SHA-256 over the config and every encoder.* parameter (name, shape, bytes).
util::Digest256 fingerprint(const EncoderConfig& config, const ModelState& state);

/// Frozen, read-only encoder. Counts invocations for the encode-once and
/// warm-cache checks.
class SceneEncoder {
 public:
  SceneEncoder(EncoderConfig config, ModelState state);

  GlobalFeatures encode(const MatF& pixels) const;
  const EncoderConfig& config() const { return config_; }
  const ModelState& state() const { return state_; }
  const util::Digest256& fingerprint() const { return fingerprint_; }
  std::size_t invocations() const { return invocations_.load(); }
  void reset_invocations() { invocations_ = 0; }

 private:
  EncoderConfig config_;
  ModelState state_;
  util::Digest256 fingerprint_;
  mutable std::atomic<std::size_t> invocations_{0};
};

struct EncoderTrainConfig {
  int epochs = 4;
  double lr = 1e-3;
  int batch = 32;
  std::uint64_t seed = 1;
};

struct EncoderTrainResult {
  ModelState state;  // all parameters frozen
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_accuracy;
};

/// Context classification from the class token; keeps the epoch with the
/// best validation context accuracy. Throws std::invalid_argument without
/// training scenes and diff::TrainingError on divergence.
EncoderTrainResult pretrain_encoder(const data::Dataset& ds, const EncoderConfig& config,
                                    const EncoderTrainConfig& train);

double context_accuracy(const EncoderConfig& config, const ModelState& state,
                        const std::vector<const data::SceneSample*>& scenes, int batch = 32);

}  // namespace scenectx::encoder
