#include "scenectx/recognizers/recognizer.hpp"

#include "scenectx/diffcore/ops.hpp"

#include <cmath>

namespace scenectx::rec {

using namespace scenectx::diff;
using nlohmann::json;

namespace {
constexpr Index kConv2KernelW = 4;
}

std::string to_string(Arch a) { return a == Arch::ar ? "ar" : "vit"; }

std::string to_string(IntegrationPoint p) {
  switch (p) {
    case IntegrationPoint::vision: return "vision";
    case IntegrationPoint::contextual: return "contextual";
    case IntegrationPoint::decoder: return "decoder";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  if (s == "ar") return Arch::ar;
  if (s == "vit") return Arch::vit;
  throw ConfigError("unknown recognizer architecture: " + s + " (ar | vit)");
}

IntegrationPoint parse_point(const std::string& s) {
  if (s == "vision") return IntegrationPoint::vision;
  if (s == "contextual") return IntegrationPoint::contextual;
  if (s == "decoder") return IntegrationPoint::decoder;
  throw ConfigError("unknown integration point: " + s + " (vision | contextual | decoder)");
}

void RecognizerConfig::validate() const {
  if (d_local <= 0 || max_len < 2 || conv_channels <= 0 || embed <= 0) throw ConfigError("recognizer dims must be positive");
  if (crop_h != patch) throw ConfigError("crop height must equal the patch size " + std::to_string(patch));
  if (max_crop_w <= 0 || max_crop_w % patch != 0) throw ConfigError("max crop width must be a multiple of the patch");
  if (arch == Arch::vit && (vit_heads <= 0 || d_local % vit_heads != 0)) throw ConfigError("vit width not divisible by heads");
}

json RecognizerConfig::to_json() const {
  return {{"arch", to_string(arch)}, {"d_local", d_local},     {"L_max", max_len},
          {"crop_h", crop_h},        {"max_crop_w", max_crop_w}, {"conv_channels", conv_channels},
          {"embed", embed},          {"vit_layers", vit_layers}, {"vit_heads", vit_heads},
          {"vit_mlp", vit_mlp},      {"patch", patch},         {"vocab", Vocab::kOutputClasses}};
}

RecognizerConfig RecognizerConfig::from_json(const json& j) {
  RecognizerConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.d_local = j.at("d_local").get<Index>();
  c.max_len = j.at("L_max").get<Index>();
  c.crop_h = j.at("crop_h").get<Index>();
  c.max_crop_w = j.at("max_crop_w").get<Index>();
  c.conv_channels = j.at("conv_channels").get<Index>();
  c.embed = j.at("embed").get<Index>();
  c.vit_layers = j.at("vit_layers").get<Index>();
  c.vit_heads = j.at("vit_heads").get<Index>();
  c.vit_mlp = j.at("vit_mlp").get<Index>();
  c.patch = j.at("patch").get<Index>();
  if (j.at("vocab").get<int>() != Vocab::kOutputClasses) throw ConfigError("checkpoint vocabulary size mismatch");
  c.validate();
  return c;
}

void ClipterConfig::validate(const RecognizerConfig& rec) const {
  fusion.validate();
  if (fusion.d_local != rec.d_local) {
    throw ConfigError("fusion d_local " + std::to_string(fusion.d_local) + " != recognizer width " +
                      std::to_string(rec.d_local));
  }
  if (rec.arch == Arch::vit && point != IntegrationPoint::vision) {
    throw ConfigError("the single-stage recognizer only has a vision integration point, not " + to_string(point));
  }
  if (fusion.mechanism == fusion::Mechanism::gated && !pool.is_infinite()) {
    throw ConfigError("gated attention needs a single global token (pool_k = inf), got pool_k = " + pool.str());
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
}

json ClipterConfig::to_json() const {
  json j = fusion.to_json();
  j["pool_k"] = pool.str();
  j["integration_point"] = to_string(point);
  j["lr"] = lr;
  return j;
}

ClipterConfig ClipterConfig::from_json(const json& j) {
  ClipterConfig c;
  c.fusion = fusion::FusionConfig::from_json(j);
  c.pool = encoder::PoolKernel::parse(j.at("pool_k").get<std::string>());
  c.point = parse_point(j.at("integration_point").get<std::string>());
  c.lr = j.at("lr").get<double>();
  return c;
}

void ModelSpec::validate() const {
  rec.validate();
  if (clipter) clipter->validate(rec);
}

json ModelSpec::to_json() const {
  json j{{"recognizer", rec.to_json()}};
  if (clipter) j["clipter"] = clipter->to_json();
  return j;
}

ModelSpec ModelSpec::from_json(const json& j) {
  ModelSpec s;
  s.rec = RecognizerConfig::from_json(j.at("recognizer"));
  if (j.contains("clipter")) s.clipter = ClipterConfig::from_json(j.at("clipter"));
  s.validate();
  return s;
}

void add_recognizer(ModelState& state, const RecognizerConfig& c, nn::Rng& rng) {
  c.validate();
  const Index d = c.d_local;
  if (c.arch == Arch::ar) {
    nn::add_linear(state, "rec.conv1", 9, c.conv_channels, rng);
    nn::add_linear(state, "rec.conv2", c.crop_h * kConv2KernelW * c.conv_channels, d, rng);
    nn::add_lstm(state, "rec.ctx.fw", d, d, rng);
    nn::add_lstm(state, "rec.ctx.bw", d, d, rng);
    nn::add_linear(state, "rec.ctx.proj", 2 * d, d, rng);
    state.add("rec.dec.embed", normal_init(Vocab::kEmbeddingRows, c.embed, 0.1f, rng));
    nn::add_linear(state, "rec.dec.query", d, d, rng);
    nn::add_lstm(state, "rec.dec.lstm", c.embed + d, d, rng);
    nn::add_linear(state, "rec.dec.out", d, Vocab::kOutputClasses, rng);
  } else {
    nn::add_linear(state, "rec.patch", c.patch * c.patch, d, rng);
    state.add("rec.pos", normal_init(c.max_crop_w / c.patch, d, 0.02f, rng));
    state.add("rec.queries", normal_init(c.max_len, d, 0.02f, rng));
    for (Index i = 0; i < c.vit_layers; ++i) nn::add_encoder_layer(state, "rec.layers." + std::to_string(i), d, c.vit_mlp, rng);
    nn::add_layer_norm(state, "rec.ln_f", d);
    nn::add_linear(state, "rec.head", d, Vocab::kOutputClasses, rng);
  }
}

void attach_clipter(ModelState& state, const ModelSpec& spec, nn::Rng& rng) {
  if (!spec.clipter) throw ConfigError("attach_clipter: model spec has no fusion attachment");
  spec.validate();
  fusion::add_fusion(state, spec.clipter->fusion, kFusionPrefix, rng);
}

namespace {

template <typename T>
struct Site {
  Graph<T>& g;
  const ModelSpec& spec;
  Var<T> global;
  Index batch;
  RecognizerProbe* probe;

  Var<T> apply(IntegrationPoint p, Var<T> local) {
    if (!spec.clipter || spec.clipter->point != p) return local;
    fusion::FusionProbe fp;
    Var<T> out = fusion::fuse(g, spec.clipter->fusion, kFusionPrefix, local, global, batch, &fp);
    if (probe != nullptr) probe->calls[static_cast<std::size_t>(p)] += fp.invocations;
    return out;
  }
};

template <typename T>
Mat<T> interleave_pixels(const std::vector<const MatF*>& crops, Index h, Index w) {
  const auto B = static_cast<Index>(crops.size());
  Mat<T> x(h * w * B, 1);
  for (Index b = 0; b < B; ++b) {
    const MatF& c = *crops[static_cast<std::size_t>(b)];
    for (Index y = 0; y < h; ++y) {
      for (Index xx = 0; xx < w; ++xx) x((y * w + xx) * B + b, 0) = static_cast<T>(c(y, xx));
    }
  }
  return x;
}

template <typename T>
Var<T> interleave_globals(Graph<T>& g, const std::vector<const MatF*>& globals, Index d_global) {
  const auto B = static_cast<Index>(globals.size());
  const Index n = globals.front()->rows();
  Mat<T> m(n * B, d_global);
  for (Index b = 0; b < B; ++b) {
    const MatF& f = *globals[static_cast<std::size_t>(b)];
    if (f.rows() != n || f.cols() != d_global) {
      throw ShapeError("global features " + shape_str(f) + " do not match " + shape_str(n, d_global));
    }
    for (Index t = 0; t < n; ++t) m.row(t * B + b) = f.row(t).template cast<T>();
  }
  return g.constant(std::move(m));
}

Index argmax_row(const auto& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return best;
}

template <typename T>
ForwardResult<T> ar_forward(Graph<T>& g, const ModelSpec& spec, const ForwardRequest& req, Site<T>& site, Index W) {
  const RecognizerConfig& c = spec.rec;
  const auto B = static_cast<Index>(req.crops.size());
  const Index d = c.d_local;
  if (W % kConv2KernelW != 0) throw ShapeError("crop width must be a multiple of 4 for the conv stack");

  ConvGeometry g1;
  g1.batch = B;
  g1.height = c.crop_h;
  g1.width = W;
  Var<T> h1 = relu(nn::linear(g, "rec.conv1", im2col(g.constant(interleave_pixels<T>(req.crops, c.crop_h, W)), g1)));
  ConvGeometry g2;
  g2.batch = B;
  g2.height = c.crop_h;
  g2.width = W;
  g2.channels = c.conv_channels;
  g2.kernel_h = c.crop_h;
  g2.kernel_w = kConv2KernelW;
  g2.stride_h = c.crop_h;
  g2.stride_w = kConv2KernelW;
  g2.pad_h = g2.pad_w = 0;
  Var<T> visual = relu(nn::linear(g, "rec.conv2", im2col(h1, g2)));  // (W/4 * B) x d
  visual = site.apply(IntegrationPoint::vision, visual);

  Var<T> context = nn::linear(g, "rec.ctx.proj", nn::bidirectional_lstm(g, "rec.ctx", visual, B, d));
  context = site.apply(IntegrationPoint::contextual, context);

  Index steps = 0;
  if (req.mode == DecodeMode::teacher) {
    if (static_cast<Index>(req.targets.size()) != B) throw ShapeError("teacher forcing needs one target per crop");
    for (const auto& t : req.targets) {
      Index n = 0;
      while (n < static_cast<Index>(t.size()) && t[static_cast<std::size_t>(n)] >= 0) ++n;
      steps = std::max(steps, n);
    }
  } else {
    steps = req.max_steps > 0 ? req.max_steps : c.max_len;
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const Var<T> zero = g.constant(Mat<T>::Zero(B, d));
  nn::LstmState<T> state{zero, zero};
  std::vector<int> inputs(static_cast<std::size_t>(B), Vocab::kPad);
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  std::vector<Var<T>> logits;
  for (Index t = 0; t < steps; ++t) {
    Var<T> emb = gather_rows(g.param("rec.dec.embed"), inputs);
    Var<T> ctx = grouped_attention(nn::linear(g, "rec.dec.query", state.h), context, context, B, scale);
    state = nn::lstm_step(g, "rec.dec.lstm", concat_cols<T>({emb, ctx}), state);
    state.h = site.apply(IntegrationPoint::decoder, state.h);
    Var<T> out = nn::linear(g, "rec.dec.out", state.h);
    logits.push_back(out);
    bool all_done = true;
    for (Index b = 0; b < B; ++b) {
      int next = Vocab::kPad;
      if (req.mode == DecodeMode::teacher) {
        const int tgt = req.targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        next = tgt >= 0 ? tgt : Vocab::kPad;
      } else {
        next = static_cast<int>(argmax_row(out.value().row(b)));
        if (next == Vocab::kEos) done[static_cast<std::size_t>(b)] = true;
      }
      inputs[static_cast<std::size_t>(b)] = next;
      all_done = all_done && done[static_cast<std::size_t>(b)];
    }
    if (req.mode == DecodeMode::greedy && all_done) break;
  }
  return {concat_rows(logits), static_cast<Index>(logits.size()), B};
}

template <typename T>
ForwardResult<T> vit_forward(Graph<T>& g, const ModelSpec& spec, const ForwardRequest& req, Site<T>& site, Index W) {
  const RecognizerConfig& c = spec.rec;
  const auto B = static_cast<Index>(req.crops.size());
  if (W % c.patch != 0 || W > c.max_crop_w) {
    throw ShapeError("crop width " + std::to_string(W) + " must be a multiple of " + std::to_string(c.patch) +
                     " and at most " + std::to_string(c.max_crop_w));
  }
  const Index P = W / c.patch;
  ConvGeometry geom;
  geom.batch = B;
  geom.height = c.crop_h;
  geom.width = W;
  geom.kernel_h = geom.kernel_w = c.patch;
  geom.stride_h = geom.stride_w = c.patch;
  geom.pad_h = geom.pad_w = 0;
  Var<T> patches = nn::linear(g, "rec.patch", im2col(g.constant(interleave_pixels<T>(req.crops, c.crop_h, W)), geom));
  patches = patches + repeat_rows(slice_rows(g.param("rec.pos"), 0, P), B);
  Var<T> x = concat_rows<T>({patches, repeat_rows(g.param("rec.queries"), B)});
  for (Index i = 0; i < c.vit_layers; ++i) x = nn::encoder_layer(g, "rec.layers." + std::to_string(i), x, c.vit_heads, B);
  x = nn::layer_norm(g, "rec.ln_f", x);
  x = site.apply(IntegrationPoint::vision, x);
  Var<T> logits = nn::linear(g, "rec.head", slice_rows(x, P * B, c.max_len * B));
  return {logits, c.max_len, B};
}

}  // namespace

template <typename T>
ForwardResult<T> recognize(Graph<T>& g, const ModelSpec& spec, const ForwardRequest& req) {
  if (req.crops.empty()) throw ShapeError("recognize: empty batch");
  const Index W = req.crops.front()->cols();
  for (const MatF* c : req.crops) {
    if (c->rows() != spec.rec.crop_h || c->cols() != W) {
      throw ShapeError("crops must be " + std::to_string(spec.rec.crop_h) + " rows with equal widths, got " +
                       shape_str(*c));
    }
  }
  const auto B = static_cast<Index>(req.crops.size());
  Site<T> site{g, spec, Var<T>{}, B, req.probe};
  if (spec.clipter) {
    if (static_cast<Index>(req.globals.size()) != B) throw ConfigError("fusion attached but global features missing");
    site.global = interleave_globals(g, req.globals, spec.clipter->fusion.d_global);
  }
  return spec.rec.arch == Arch::ar ? ar_forward(g, spec, req, site, W) : vit_forward(g, spec, req, site, W);
}

template ForwardResult<float> recognize(Graph<float>&, const ModelSpec&, const ForwardRequest&);
template ForwardResult<double> recognize(Graph<double>&, const ModelSpec&, const ForwardRequest&);

std::vector<int> target_ids(const std::string& word, Index max_len) {
  if (static_cast<Index>(word.size()) + 1 > max_len) {
    throw std::invalid_argument("word '" + word + "' does not fit L_max = " + std::to_string(max_len));
  }
  std::vector<int> ids = Vocab::encode(word);
  ids.push_back(Vocab::kEos);
  ids.resize(static_cast<std::size_t>(max_len), -1);
  return ids;
}

Transcript decode_greedy(const MatF& logits, Index max_len) {
  if (!logits.allFinite()) throw NumericError("decode_greedy");
  Transcript t;
  for (Index s = 0; s < std::min(max_len, logits.rows()); ++s) {
    const auto id = static_cast<int>(argmax_row(logits.row(s)));
    if (id == Vocab::kEos) break;
    t.ids.push_back(id);
    t.text.push_back(Vocab::to_char(id));
  }
  return t;
}

MatF item_logits(const MatF& logits, Index steps, Index batch, Index b) {
  MatF out(steps, logits.cols());
  for (Index t = 0; t < steps; ++t) out.row(t) = logits.row(t * batch + b);
  return out;
}

std::vector<Transcript> read_crops(const ModelState& state, const ModelSpec& spec, const std::vector<const MatF*>& crops,
                                   const std::vector<const MatF*>& globals, RecognizerProbe* probe) {
  Graph<float> g(&state);
  g.set_grad_enabled(false);
  ForwardRequest req;
  req.crops = crops;
  req.globals = globals;
  req.probe = probe;
  const auto r = recognize(g, spec, req);
  std::vector<Transcript> out;
  for (Index b = 0; b < r.batch; ++b) out.push_back(decode_greedy(item_logits(r.logits.value(), r.steps, r.batch, b), spec.rec.max_len));
  return out;
}

}  // namespace scenectx::rec
