#include "scenectx/diffcore/grad_check.hpp"
#include "scenectx/diffcore/ops.hpp"
#include "scenectx/fusion/cost_model.hpp"
#include "scenectx/recognizers/recognizer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace scenectx;
using namespace scenectx::rec;

namespace {

struct Fixture {
  ModelSpec spec;
  ModelState state;
  std::vector<MatF> crops;
  std::vector<MatF> globals;

  std::vector<const MatF*> crop_ptrs() const {
    std::vector<const MatF*> v;
    for (const auto& c : crops) v.push_back(&c);
    return v;
  }
  std::vector<const MatF*> global_ptrs() const {
    std::vector<const MatF*> v;
    for (const auto& g : globals) v.push_back(&g);
    return v;
  }
};

ModelSpec make_spec(Arch arch, std::optional<ClipterConfig> clipter = {}) {
  ModelSpec s;
  s.rec.arch = arch;
  s.clipter = std::move(clipter);
  return s;
}

ClipterConfig gated_vision() { return ClipterConfig{}; }

ClipterConfig tiny_at(IntegrationPoint p) {
  ClipterConfig c;
  c.fusion = fusion::FusionConfig::mhca(fusion::Preset::tiny, 48, 64);
  c.pool = encoder::PoolKernel::of(4);
  c.point = p;
  c.lr = 3e-5;
  return c;
}

Fixture make_fixture(const ModelSpec& spec, Index batch, Index n_global, std::uint64_t seed, Index width = 32) {
  Fixture f;
  f.spec = spec;
  nn::Rng rng(seed);
  add_recognizer(f.state, spec.rec, rng);
  if (spec.clipter) attach_clipter(f.state, spec, rng);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (Index b = 0; b < batch; ++b) {
    MatF c(8, width);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng) < 0.4f ? 1.0f : 0.0f;
    f.crops.push_back(c);
    MatF g(n_global, 64);
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = u(rng) * 2.0f - 1.0f;
    f.globals.push_back(g);
  }
  return f;
}

MatF run(const Fixture& f, const ModelSpec& spec, RecognizerProbe* probe = nullptr, Index max_steps = 0) {
  diff::Graph<float> g(&f.state);
  ForwardRequest req;
  req.crops = f.crop_ptrs();
  if (spec.clipter) req.globals = f.global_ptrs();
  req.max_steps = max_steps;
  req.probe = probe;
  return recognize(g, spec, req).logits.value();
}

std::vector<std::pair<Arch, ClipterConfig>> all_sites() {
  std::vector<std::pair<Arch, ClipterConfig>> out;
  for (auto p : {IntegrationPoint::vision, IntegrationPoint::contextual, IntegrationPoint::decoder}) {
    ClipterConfig gated;
    gated.point = p;
    out.emplace_back(Arch::ar, gated);
    out.emplace_back(Arch::ar, tiny_at(p));
  }
  out.emplace_back(Arch::vit, gated_vision());
  out.emplace_back(Arch::vit, tiny_at(IntegrationPoint::vision));
  return out;
}

}  // namespace

TEST(Recognizer, GatingIdentityAtAlphaZero) {
  for (const auto& [arch, clip] : all_sites()) {
    const auto spec = make_spec(arch, clip);
    const Index ng = clip.pool.is_infinite() ? 1 : 10;
    const auto f = make_fixture(spec, 3, ng, 11);
    const MatF fused = run(f, spec);
    const MatF base = run(f, make_spec(arch));
    ASSERT_EQ(fused.rows(), base.rows());
    EXPECT_LT((fused - base).cwiseAbs().maxCoeff(), 1e-6f) << to_string(arch) << " " << to_string(clip.point);
  }
}

TEST(Recognizer, NonzeroAlphaChangesOutput) {
  for (const auto& [arch, clip] : all_sites()) {
    const auto spec = make_spec(arch, clip);
    auto f = make_fixture(spec, 2, clip.pool.is_infinite() ? 1 : 10, 12);
    f.state.at("clipter.alpha").value(0, 0) = 0.7f;
    diff::Graph<float> g(&f.state);
    ForwardRequest req;
    req.crops = f.crop_ptrs();
    req.globals = f.global_ptrs();
    req.mode = DecodeMode::teacher;
    req.targets = {target_ids("abcd", 8), target_ids("efgh", 8)};
    const MatF fused = recognize(g, spec, req).logits.value();
    diff::Graph<float> g2(&f.state);
    req.globals.clear();
    const MatF base = recognize(g2, make_spec(arch), req).logits.value();
    EXPECT_GT((fused - base).cwiseAbs().maxCoeff(), 1e-4f) << to_string(arch) << " " << to_string(clip.point);
  }
}

TEST(Recognizer, InvalidSitesRejected) {
  for (auto p : {IntegrationPoint::contextual, IntegrationPoint::decoder}) {
    ClipterConfig c;
    c.point = p;
    EXPECT_THROW(make_spec(Arch::vit, c).validate(), ConfigError);
  }
  ClipterConfig pooled;
  pooled.pool = encoder::PoolKernel::of(4);
  EXPECT_THROW(make_spec(Arch::ar, pooled).validate(), ConfigError);
  EXPECT_THROW(parse_point("encoder"), ConfigError);
}

TEST(Recognizer, ExactlyOneSiteActiveAndCallCounts) {
  for (const auto& [arch, clip] : all_sites()) {
    const auto spec = make_spec(arch, clip);
    auto f = make_fixture(spec, 1, clip.pool.is_infinite() ? 1 : 10, 13);
    RecognizerProbe probe;
    diff::Graph<float> g(&f.state);
    ForwardRequest req;
    req.crops = f.crop_ptrs();
    req.globals = f.global_ptrs();
    req.mode = DecodeMode::teacher;
    req.targets = {target_ids("abcde", 8)};  // 6 decoding steps with EOS
    req.probe = &probe;
    const auto r = recognize(g, spec, req);
    EXPECT_EQ(probe.total(), probe.at(clip.point));
    if (arch == Arch::ar) EXPECT_EQ(r.steps, 6);
    const std::size_t want = clip.point == IntegrationPoint::decoder ? 6u : 1u;
    EXPECT_EQ(probe.at(clip.point), want) << to_string(arch) << " " << to_string(clip.point);
  }
}

TEST(Recognizer, DecoderFusionOncePerGreedyStep) {
  ClipterConfig c;
  c.point = IntegrationPoint::decoder;
  const auto spec = make_spec(Arch::ar, c);
  const auto f = make_fixture(spec, 1, 1, 14);
  RecognizerProbe probe;
  const MatF logits = run(f, spec, &probe, 6);
  EXPECT_EQ(static_cast<std::size_t>(logits.rows()), probe.at(IntegrationPoint::decoder));
  EXPECT_LE(logits.rows(), 6);
}

TEST(Recognizer, VitPatchArithmetic) {
  const auto spec = make_spec(Arch::vit, gated_vision());
  const auto f = make_fixture(spec, 2, 1, 15, 40);
  diff::Graph<float> g(&f.state);
  ForwardRequest req;
  req.crops = f.crop_ptrs();
  req.globals = f.global_ptrs();
  const auto r = recognize(g, spec, req);
  EXPECT_EQ(r.steps, 8);
  EXPECT_EQ(r.logits.rows(), 16);
  EXPECT_EQ(r.logits.cols(), Vocab::kOutputClasses);
  // 5 patch tokens + 8 queries per crop pass through the fusion site.
  EXPECT_EQ(g.value(r.logits.id).rows(), 16);
}

TEST(Recognizer, VitInvariantToGlobalTokenPermutation) {
  auto spec = make_spec(Arch::vit, tiny_at(IntegrationPoint::vision));
  auto f = make_fixture(spec, 2, 10, 16);
  f.state.at("clipter.alpha").value(0, 0) = 0.9f;
  const MatF a = run(f, spec);
  for (auto& gl : f.globals) {
    MatF p = gl;
    for (Index r = 0; r < gl.rows(); ++r) p.row(r) = gl.row((r * 3 + 1) % gl.rows());
    gl = p;
  }
  const MatF b = run(f, spec);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Recognizer, BatchItemsAreIndependent) {
  for (auto arch : {Arch::ar, Arch::vit}) {
    ClipterConfig c = arch == Arch::ar ? tiny_at(IntegrationPoint::contextual) : tiny_at(IntegrationPoint::vision);
    const auto spec = make_spec(arch, c);
    auto f = make_fixture(spec, 3, 10, 17);
    f.state.at("clipter.alpha").value(0, 0) = 0.5f;
    diff::Graph<float> g(&f.state);
    ForwardRequest req;
    req.crops = f.crop_ptrs();
    req.globals = f.global_ptrs();
    req.mode = DecodeMode::teacher;
    req.targets = {target_ids("abcd", 8), target_ids("bcd", 8), target_ids("cdefg", 8)};
    const auto r = recognize(g, spec, req);
    Fixture one = f;
    one.crops = {f.crops[1]};
    one.globals = {f.globals[1]};
    diff::Graph<float> g1(&one.state);
    ForwardRequest r1 = req;
    r1.crops = one.crop_ptrs();
    r1.globals = one.global_ptrs();
    r1.targets = {req.targets[1]};
    const auto single = recognize(g1, spec, r1);
    const MatF batched = item_logits(r.logits.value(), r.steps, 3, 1);
    EXPECT_LT((batched.topRows(single.steps) - single.logits.value()).cwiseAbs().maxCoeff(), 1e-4f);
  }
}

TEST(Recognizer, ParameterCountAdditivity) {
  for (const auto& [arch, clip] : all_sites()) {
    ModelState base, full;
    nn::Rng r1(3), r2(3);
    add_recognizer(base, make_spec(arch).rec, r1);
    const auto spec = make_spec(arch, clip);
    add_recognizer(full, spec.rec, r2);
    attach_clipter(full, spec, r2);
    EXPECT_EQ(full.scalar_count(), base.scalar_count() + fusion::count_params(clip.fusion) + 1);
  }
}

TEST(Recognizer, ConfigJsonRoundTrip) {
  const auto spec = make_spec(Arch::ar, tiny_at(IntegrationPoint::decoder));
  const auto j = spec.to_json();
  EXPECT_EQ(j.at("clipter").at("pool_k"), "4");
  EXPECT_EQ(j.at("clipter").at("integration_point"), "decoder");
  EXPECT_EQ(j.at("clipter").at("mechanism"), "mhca");
  EXPECT_EQ(ModelSpec::from_json(j).to_json(), j);
}

class RecognizerGrad : public ::testing::TestWithParam<int> {};

TEST_P(RecognizerGrad, EndToEndCentralDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  for (const auto& [arch, clip] : all_sites()) {
    const auto spec = make_spec(arch, clip);
    auto f = make_fixture(spec, 2, clip.pool.is_infinite() ? 1 : 10, 100 + seed);
    f.state.at("clipter.alpha").value(0, 0) = 0.3f;
    // Zero biases put ReLU inputs of blank patches exactly on the kink.
    nn::Rng brng(seed + 7);
    std::uniform_real_distribution<float> ub(0.05f, 0.2f);
    for (auto& p : f.state) {
      if (p.name.size() > 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0) {
        for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += ub(brng);
      }
    }
    const auto params = f.state.cast<double>();
    const auto crops = f.crop_ptrs();
    const auto globals = f.global_ptrs();
    diff::Computation<double> fn = [&](diff::Graph<double>& g) {
      ForwardRequest req;
      req.crops = crops;
      req.globals = globals;
      req.mode = DecodeMode::teacher;
      req.targets = {target_ids("ab", 8), target_ids("cde", 8)};
      const auto r = recognize(g, spec, req);
      std::vector<int> flat;
      for (Index t = 0; t < r.steps; ++t) {
        for (Index b = 0; b < r.batch; ++b) flat.push_back(req.targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]);
      }
      return diff::cross_entropy(r.logits, flat);
    };
    diff::GradCheckOptions opt;
    opt.max_entries_per_param = 3;
    opt.seed = seed;
    // Recurrent weights reach ~1e-8 gradients where FD roundoff is ~1e-11.
    opt.atol = 1e-10;
    const auto rep = diff::grad_check(fn, params, opt);
    EXPECT_TRUE(rep.pass) << to_string(arch) << "/" << to_string(clip.point) << "/" << fusion::to_string(clip.fusion.mechanism)
                          << " worst " << rep.worst_parameter << " " << rep.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, RecognizerGrad, ::testing::Range(0, 5));

TEST(Decode, GreedyExamples) {
  MatF stamp = MatF::Zero(8, Vocab::kOutputClasses);
  const std::string word = "stamp";
  for (std::size_t i = 0; i < word.size(); ++i) stamp(static_cast<Index>(i), Vocab::from_char(word[i])) = 1.0f;
  stamp(5, Vocab::kEos) = 1.0f;
  EXPECT_EQ(decode_greedy(stamp, 8).text, "stamp");
  EXPECT_EQ(decode_greedy(MatF::Zero(8, Vocab::kOutputClasses), 8).text, "aaaaaaaa");
  MatF eos = MatF::Zero(8, Vocab::kOutputClasses);
  eos(0, Vocab::kEos) = 3.0f;
  EXPECT_TRUE(decode_greedy(eos, 8).text.empty());
  EXPECT_EQ(decode_greedy(MatF::Zero(12, Vocab::kOutputClasses), 8).text.size(), 8u);
  MatF bad = MatF::Zero(2, Vocab::kOutputClasses);
  bad(0, 0) = std::nanf("");
  EXPECT_THROW(decode_greedy(bad, 8), NumericError);
}

TEST(Decode, TargetIds) {
  const auto t = target_ids("abc", 8);
  EXPECT_EQ(t, (std::vector<int>{0, 1, 2, Vocab::kEos, -1, -1, -1, -1}));
  EXPECT_THROW(target_ids("abcdefgh", 8), std::invalid_argument);
}
