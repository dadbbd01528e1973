#include "scenectx/fusion/fusion.hpp"

#include "scenectx/diffcore/ops.hpp"

namespace scenectx::fusion {

using namespace scenectx::diff;

std::string to_string(Mechanism m) { return m == Mechanism::gated ? "gated" : "mhca"; }

std::string to_string(Preset p) {
  switch (p) {
    case Preset::tiny: return "tiny";
    case Preset::mini: return "mini";
    case Preset::small: return "small";
    case Preset::none: break;
  }
  return "none";
}

Mechanism parse_mechanism(const std::string& s) {
  if (s == "gated") return Mechanism::gated;
  if (s == "mhca") return Mechanism::mhca;
  throw ConfigError("unknown fusion mechanism '" + s + "' (expected gated|mhca)");
}

Preset parse_preset(const std::string& s) {
  if (s == "tiny") return Preset::tiny;
  if (s == "mini") return Preset::mini;
  if (s == "small") return Preset::small;
  if (s == "none" || s.empty()) return Preset::none;
  throw ConfigError("unknown MH-CA preset '" + s + "' (expected tiny|mini|small)");
}

FeatureSequence::FeatureSequence(MatF t, Role r) : tokens(std::move(t)), role(r) {
  if (tokens.rows() < 1 || tokens.cols() < 1) throw ShapeError("FeatureSequence must be at least 1x1");
  if (!tokens.allFinite()) throw NumericError("FeatureSequence");
}

FusionConfig FusionConfig::gated(Index d_local, Index d_global) {
  FusionConfig c;
  c.mechanism = Mechanism::gated;
  c.d_local = d_local;
  c.d_global = d_global;
  return c;
}

FusionConfig FusionConfig::mhca(Preset preset, Index d_local, Index d_global) {
  FusionConfig c;
  c.mechanism = Mechanism::mhca;
  c.preset = preset;
  c.d_local = d_local;
  c.d_global = d_global;
  switch (preset) {
    case Preset::tiny: c.heads = 2, c.layers = 2, c.hidden_size = 128, c.intermediate_size = 512; break;
    case Preset::mini: c.heads = 4, c.layers = 4, c.hidden_size = 256, c.intermediate_size = 1024; break;
    case Preset::small: c.heads = 8, c.layers = 4, c.hidden_size = 512, c.intermediate_size = 2048; break;
    case Preset::none: throw ConfigError("MH-CA requires a preset");
  }
  return c;
}

void FusionConfig::validate() const {
  if (d_local <= 0 || d_global <= 0) throw ConfigError("fusion dims must be positive");
  if (mechanism == Mechanism::gated) return;
  if (layers < 1) throw ConfigError("MH-CA needs at least one layer");
  if (heads < 1 || hidden_size % heads != 0) {
    throw ConfigError("MH-CA hidden_size " + std::to_string(hidden_size) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (intermediate_size < 1) throw ConfigError("MH-CA intermediate_size must be positive");
}

nlohmann::json FusionConfig::to_json() const {
  return {{"mechanism", to_string(mechanism)}, {"preset", to_string(preset)},
          {"heads", heads},                   {"layers", layers},
          {"hidden_size", hidden_size},       {"intermediate_size", intermediate_size},
          {"d_local", d_local},               {"d_global", d_global}};
}

FusionConfig FusionConfig::from_json(const nlohmann::json& j) {
  const auto mech = parse_mechanism(j.at("mechanism").get<std::string>());
  const Index dl = j.value("d_local", Index{48});
  const Index dg = j.value("d_global", Index{64});
  FusionConfig c = mech == Mechanism::gated
                       ? gated(dl, dg)
                       : mhca(parse_preset(j.value("preset", std::string("tiny"))), dl, dg);
  // Explicit sizes override the preset table.
  if (mech == Mechanism::mhca) {
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
  }
  c.validate();
  return c;
}

double reference_learning_rate(const FusionConfig& config) {
  if (config.mechanism == Mechanism::gated) return 2e-5;
  return config.preset == Preset::small ? 1e-5 : 3e-5;
}

void add_fusion(ModelState& state, const FusionConfig& config, const std::string& prefix, nn::Rng& rng) {
  config.validate();
  nn::add_linear(state, prefix + ".proj", config.d_global, config.d_local, rng);
  if (config.mechanism == Mechanism::gated) {
    nn::add_linear(state, prefix + ".gate", 2 * config.d_local, config.d_local, rng);
  } else {
    const Index h = config.hidden_size;
    nn::add_linear(state, prefix + ".local_in", config.d_local, h, rng);
    nn::add_linear(state, prefix + ".global_in", config.d_local, h, rng);
    for (Index l = 0; l < config.layers; ++l) {
      const std::string lp = prefix + ".layers." + std::to_string(l);
      nn::add_attention(state, lp + ".attn", h, h, h, h, rng);
      nn::add_layer_norm(state, lp + ".ln1", h);
      nn::add_linear(state, lp + ".fc1", h, config.intermediate_size, rng);
      nn::add_linear(state, lp + ".fc2", config.intermediate_size, h, rng);
      nn::add_layer_norm(state, lp + ".ln2", h);
    }
    nn::add_linear(state, prefix + ".out", h, config.d_local, rng);
  }
  state.add(prefix + ".alpha", MatF::Zero(1, 1));
}

template <typename T>
Var<T> project_global(Graph<T>& g, const std::string& prefix, Var<T> global) {
  const auto& w = g.params()->at(prefix + ".proj.weight").value;
  if (global.cols() != w.cols()) {
    throw ShapeError("project_global: global width " + std::to_string(global.cols()) + " but projection expects " +
                     std::to_string(w.cols()));
  }
  return nn::linear(g, prefix + ".proj", global);
}

template <typename T>
Var<T> gated_attention(Var<T> local, Var<T> global, Var<T> weight, Var<T> bias, Index groups) {
  if (global.rows() != groups) {
    throw ConfigError("gated attention needs exactly one global token per sequence, got " +
                      std::to_string(global.rows() / std::max<Index>(groups, 1)));
  }
  if (local.cols() != global.cols()) {
    throw ShapeError("gated attention: local width " + std::to_string(local.cols()) + " vs global " +
                     std::to_string(global.cols()));
  }
  if (local.rows() % groups != 0) throw ShapeError("gated attention: local rows not divisible by groups");
  Var<T> g_tiled = tile_rows(global, local.rows() / groups);
  Var<T> gate = softmax_rows(diff::linear(concat_cols<T>({local, g_tiled}), weight, bias));
  return gate * local + one_minus(gate) * g_tiled;
}

template <typename T>
Var<T> mhca_block(Graph<T>& g, const FusionConfig& config, const std::string& prefix, Var<T> local, Var<T> global,
                  Index groups, std::vector<nn::AttentionMaps<T>>* layer_maps) {
  config.validate();
  if (local.cols() != config.d_local || global.cols() != config.d_local) {
    throw ShapeError("mhca_block: streams must have width d_local=" + std::to_string(config.d_local));
  }
  Var<T> x = nn::linear(g, prefix + ".local_in", local);
  Var<T> kv = nn::linear(g, prefix + ".global_in", global);
  if (layer_maps != nullptr) layer_maps->assign(static_cast<std::size_t>(config.layers), {});
  for (Index l = 0; l < config.layers; ++l) {
    const std::string lp = prefix + ".layers." + std::to_string(l);
    auto* maps = layer_maps != nullptr ? &(*layer_maps)[static_cast<std::size_t>(l)] : nullptr;
    Var<T> att = nn::multi_head_attention(g, lp + ".attn", x, kv, config.heads, groups, maps);
    x = nn::layer_norm(g, lp + ".ln1", x + att);
    Var<T> ff = nn::linear(g, lp + ".fc2", gelu(nn::linear(g, lp + ".fc1", x)));
    x = nn::layer_norm(g, lp + ".ln2", x + ff);
  }
  return nn::linear(g, prefix + ".out", x);
}

template <typename T>
Var<T> tanh_gate(Var<T> local, Var<T> mixed, Var<T> alpha) {
  if (local.rows() != mixed.rows() || local.cols() != mixed.cols()) {
    throw ShapeError("tanh_gate: local " + shape_str(local.value()) + " vs mixed " + shape_str(mixed.value()));
  }
  Var<T> c = diff::tanh(alpha);
  return scalar_mul(one_minus(c), local) + scalar_mul(c, mixed);
}

template <typename T>
Var<T> fuse(Graph<T>& g, const FusionConfig& config, const std::string& prefix, Var<T> local, Var<T> global_raw,
            Index groups, FusionProbe* probe) {
  if (probe != nullptr) probe->invocations += static_cast<std::size_t>(groups);
  Var<T> global = project_global(g, prefix, global_raw);
  Var<T> mixed = config.mechanism == Mechanism::gated
                     ? gated_attention(local, global, g.param(prefix + ".gate.weight"),
                                       g.param(prefix + ".gate.bias"), groups)
                     : mhca_block(g, config, prefix, local, global, groups);
  return tanh_gate(local, mixed, g.param(prefix + ".alpha"));
}

#define SCENECTX_INSTANTIATE_FUSION(T)                                                                      \
  template Var<T> project_global(Graph<T>&, const std::string&, Var<T>);                                    \
  template Var<T> gated_attention(Var<T>, Var<T>, Var<T>, Var<T>, Index);                                   \
  template Var<T> mhca_block(Graph<T>&, const FusionConfig&, const std::string&, Var<T>, Var<T>, Index,      \
                             std::vector<nn::AttentionMaps<T>>*);                                           \
  template Var<T> tanh_gate(Var<T>, Var<T>, Var<T>);                                                        \
  template Var<T> fuse(Graph<T>&, const FusionConfig&, const std::string&, Var<T>, Var<T>, Index, FusionProbe*);

SCENECTX_INSTANTIATE_FUSION(float)
SCENECTX_INSTANTIATE_FUSION(double)

FeatureSequence project_global(const FeatureSequence& global, const MatF& weight, const MatF& bias) {
  Graph<float> g;
  g.set_grad_enabled(false);
  auto out = diff::linear(g.constant(global.tokens), g.constant(weight), g.constant(bias));
  return {out.value(), Role::global};
}

FeatureSequence gated_attention(const FeatureSequence& local, const FeatureSequence& global, const MatF& weight,
                                const MatF& bias) {
  if (global.length() != 1) {
    throw ConfigError("gated attention needs exactly one global token, got " + std::to_string(global.length()));
  }
  Graph<float> g;
  g.set_grad_enabled(false);
  auto out = gated_attention(g.constant(local.tokens), g.constant(global.tokens), g.constant(weight),
                             g.constant(bias), 1);
  return {out.value(), Role::mixed};
}

FeatureSequence mhca_block(const FeatureSequence& local, const FeatureSequence& global, const FusionConfig& config,
                           const ModelState& state, const std::string& prefix,
                           std::vector<nn::AttentionMaps<float>>* layer_maps) {
  Graph<float> g(&state);
  g.set_grad_enabled(false);
  auto out = mhca_block(g, config, prefix, g.constant(local.tokens), g.constant(global.tokens), 1, layer_maps);
  return {out.value(), Role::mixed};
}

FeatureSequence tanh_gate(const FeatureSequence& local, const FeatureSequence& mixed, float alpha) {
  Graph<float> g;
  g.set_grad_enabled(false);
  auto out = tanh_gate(g.constant(local.tokens), g.constant(mixed.tokens), g.constant(MatF::Constant(1, 1, alpha)));
  return {out.value(), Role::fused};
}

}  // namespace scenectx::fusion
