#include "scenectx/global_encoder/encoder.hpp"

#include "scenectx/diffcore/ops.hpp"
#include "scenectx/diffcore/optimizer.hpp"
#include "scenectx/util/seed.hpp"

#include <algorithm>
#include <numeric>

namespace scenectx::encoder {

using namespace scenectx::diff;
using nlohmann::json;

void EncoderConfig::validate() const {
  if (patch <= 0 || image <= 0 || image % patch != 0) {
    throw ConfigError("encoder image size " + std::to_string(image) + " not divisible by patch " + std::to_string(patch));
  }
  if (dim <= 0 || depth < 1 || mlp <= 0 || classes < 1) throw ConfigError("encoder dims must be positive");
  if (heads <= 0 || dim % heads != 0) throw ConfigError("encoder dim not divisible by heads");
}

json EncoderConfig::to_json() const {
  return {{"image", image}, {"patch", patch}, {"dim", dim}, {"depth", depth},
          {"heads", heads}, {"mlp", mlp},     {"classes", classes}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.image = j.at("image").get<Index>();
  c.patch = j.at("patch").get<Index>();
  c.dim = j.at("dim").get<Index>();
  c.depth = j.at("depth").get<Index>();
  c.heads = j.at("heads").get<Index>();
  c.mlp = j.at("mlp").get<Index>();
  c.classes = j.at("classes").get<Index>();
  c.validate();
  return c;
}

void add_encoder(ModelState& state, const EncoderConfig& config, nn::Rng& rng) {
  config.validate();
  nn::add_linear(state, "encoder.patch", config.patch * config.patch, config.dim, rng);
  state.add("encoder.cls", normal_init(1, config.dim, 0.02f, rng));
  state.add("encoder.pos", normal_init(config.tokens(), config.dim, 0.02f, rng));
  for (Index i = 0; i < config.depth; ++i) {
    nn::add_encoder_layer(state, "encoder.layers." + std::to_string(i), config.dim, config.mlp, rng);
  }
  nn::add_layer_norm(state, "encoder.ln_f", config.dim);
  nn::add_linear(state, "encoder.head", config.dim, config.classes, rng);
}

template <typename T>
Var<T> encoder_tokens(Graph<T>& g, const EncoderConfig& config, const std::vector<const MatF*>& images) {
  const auto B = static_cast<Index>(images.size());
  if (B == 0) throw ShapeError("encoder_tokens: empty batch");
  const Index S = config.image;
  Mat<T> x(S * S * B, 1);
  for (Index b = 0; b < B; ++b) {
    const MatF& img = *images[static_cast<std::size_t>(b)];
    if (img.rows() != S || img.cols() != S) {
      throw ShapeError("encoder expects " + shape_str(S, S) + " images divisible by patch " +
                       std::to_string(config.patch) + ", got " + shape_str(img));
    }
    for (Index y = 0; y < S; ++y) {
      for (Index xx = 0; xx < S; ++xx) x((y * S + xx) * B + b, 0) = static_cast<T>(img(y, xx));
    }
  }
  ConvGeometry geom;
  geom.batch = B;
  geom.height = S;
  geom.width = S;
  geom.kernel_h = geom.kernel_w = config.patch;
  geom.stride_h = geom.stride_w = config.patch;
  geom.pad_h = geom.pad_w = 0;
  Var<T> patches = nn::linear(g, "encoder.patch", im2col(g.constant(std::move(x)), geom));
  Var<T> h = concat_rows<T>({tile_rows(g.param("encoder.cls"), B), patches});
  h = h + repeat_rows(g.param("encoder.pos"), B);
  for (Index i = 0; i < config.depth; ++i) {
    h = nn::encoder_layer(g, "encoder.layers." + std::to_string(i), h, config.heads, B);
  }
  return nn::layer_norm(g, "encoder.ln_f", h);
}

template <typename T>
Var<T> context_logits(Graph<T>& g, Var<T> tokens, Index batch) {
  return nn::linear(g, "encoder.head", slice_rows(tokens, 0, batch));
}

template Var<float> encoder_tokens(Graph<float>&, const EncoderConfig&, const std::vector<const MatF*>&);
template Var<double> encoder_tokens(Graph<double>&, const EncoderConfig&, const std::vector<const MatF*>&);
template Var<float> context_logits(Graph<float>&, Var<float>, Index);
template Var<double> context_logits(Graph<double>&, Var<double>, Index);

util::Digest256 fingerprint(const EncoderConfig& config, const ModelState& state) {
  util::Sha256 h;
  h.update(config.to_json().dump());
  for (const auto& p : state) {
    if (p.name.rfind("encoder.", 0) != 0) continue;
    h.update(p.name);
    const std::uint64_t shape[2] = {static_cast<std::uint64_t>(p.value.rows()), static_cast<std::uint64_t>(p.value.cols())};
    h.update(shape, sizeof(shape));
    h.update(p.value.data(), sizeof(float) * static_cast<std::size_t>(p.value.size()));
  }
  return h.finish();
}

SceneEncoder::SceneEncoder(EncoderConfig config, ModelState state) : config_(config), state_(std::move(state)) {
  config_.validate();
  state_.set_frozen("", true);
  fingerprint_ = encoder::fingerprint(config_, state_);
}

GlobalFeatures SceneEncoder::encode(const MatF& pixels) const {
  ++invocations_;
  Graph<float> g(&state_);
  g.set_grad_enabled(false);
  Var<float> tokens = encoder_tokens(g, config_, {&pixels});
  return {tokens.value(), config_.grid(), config_.grid()};
}

double context_accuracy(const EncoderConfig& config, const ModelState& state,
                        const std::vector<const data::SceneSample*>& scenes, int batch) {
  if (scenes.empty()) throw std::invalid_argument("context accuracy over no scenes");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(scenes.size(), start + static_cast<std::size_t>(batch));
    std::vector<const MatF*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&scenes[i]->pixels);
    Graph<float> g(&state);
    g.set_grad_enabled(false);
    const auto B = static_cast<Index>(images.size());
    const MatF& logits = context_logits(g, encoder_tokens(g, config, images), B).value();
    for (Index b = 0; b < B; ++b) {
      Index arg = 0;
      logits.row(b).maxCoeff(&arg);
      correct += arg == scenes[start + static_cast<std::size_t>(b)]->context;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(scenes.size());
}

EncoderTrainResult pretrain_encoder(const data::Dataset& ds, const EncoderConfig& config,
                                    const EncoderTrainConfig& train) {
  const auto scenes = ds.select(data::Split::train);
  const auto val = ds.select(data::Split::val);
  if (scenes.empty()) throw std::invalid_argument("pretrain_encoder: no training scenes");
  if (train.batch < 1 || train.epochs < 1) throw ConfigError("pretrain_encoder: batch and epochs must be positive");
  if (config.classes != ds.spec.contexts) throw ConfigError("encoder head size must equal the context count");

  EncoderTrainResult result;
  ModelState state;
  nn::Rng rng(util::mix_seed(train.seed, 0x656e63));
  add_encoder(state, config, rng);
  Adam adam({.lr = train.lr});
  ModelState best = state;
  double best_acc = -1.0;

  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    nn::Rng shuffle_rng(util::mix_seed(train.seed, static_cast<std::uint64_t>(epoch) + 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train.batch));
      std::vector<const MatF*> images;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&scenes[order[i]]->pixels);
        targets.push_back(scenes[order[i]]->context);
      }
      try {
        Graph<float> g(&state);
        const auto B = static_cast<Index>(images.size());
        Var<float> loss = cross_entropy(context_logits(g, encoder_tokens(g, config, images), B), targets);
        g.backward(loss);
        loss_sum += loss.value()(0, 0);
        ++batches;
        adam.step(state, g.parameter_grads());
      } catch (const NumericError& e) {
        bool finite = true;
        for (const auto& p : state) finite = finite && p.value.allFinite();
        throw TrainingError(std::string("encoder pretraining diverged: ") + e.what(), finite ? state : best);
      }
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    const double acc = val.empty() ? 0.0 : context_accuracy(config, state, val);
    result.epoch_val_accuracy.push_back(acc);
    if (val.empty() || acc > best_acc) {
      best_acc = acc;
      best = state;
    }
  }
  best.set_frozen("", true);
  result.state = std::move(best);
  result.val_accuracy = best_acc;
  return result;
}

}  // namespace scenectx::encoder
