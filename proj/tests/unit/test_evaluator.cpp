#include "scenectx/evaluator/evaluator.hpp"
#include "scenectx/fusion/cost_model.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace scenectx;
using namespace scenectx::eval;

namespace {

struct Fixture {
  data::Dataset ds;
  encoder::EncoderConfig ecfg;
  std::unique_ptr<encoder::SceneEncoder> enc;
  rec::ModelSpec base;
  rec::ModelSpec clip;
  diff::ModelState base_state;
  diff::ModelState clip_state;

  explicit Fixture(rec::IntegrationPoint point = rec::IntegrationPoint::vision) {
    ds = data::generate_dataset(data::ContextSpec::generate(4, 20, 10, 3), {8, 4, 6, 6}, 3);
    ecfg.dim = 32;
    ecfg.depth = 1;
    ecfg.heads = 2;
    ecfg.mlp = 32;
    diff::ModelState es;
    nn::Rng rng(5);
    encoder::add_encoder(es, ecfg, rng);
    enc = std::make_unique<encoder::SceneEncoder>(ecfg, es);
    rec::add_recognizer(base_state, base.rec, rng);
    clip.rec = base.rec;
    rec::ClipterConfig c;
    c.fusion = fusion::FusionConfig::gated(48, 32);
    c.point = point;
    clip.clipter = c;
    clip_state = base_state;
    rec::attach_clipter(clip_state, clip, rng);
    clip_state.at("clipter.alpha").value(0, 0) = 0.7f;
  }
};

PipelineTrace synthetic_trace(const std::vector<double>& seconds) {
  PipelineTrace t;
  for (std::size_t i = 0; i < seconds.size(); ++i) {
    SceneTrace s;
    s.scene_id = i + 1;
    s.total_seconds = seconds[i];
    t.scenes.push_back(s);
  }
  return t;
}

SplitResult split_with(const std::string& name, std::size_t words, std::size_t correct) {
  SplitResult r;
  r.name = name;
  for (std::size_t i = 0; i < words; ++i) r.counts.add(i % 9 == 0, i < correct);
  return r;
}

}  // namespace

TEST(Metrics, AverageAndWeightedAverageFromDefinitions) {
  EvalReport r;
  r.splits = {split_with("eval_iv", 100, 100), split_with("eval_oov", 300, 150)};
  r.finalize();
  EXPECT_DOUBLE_EQ(r.average, 0.75);
  EXPECT_DOUBLE_EQ(r.weighted_average, 0.625);
  EXPECT_DOUBLE_EQ(r.iv_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.oov_accuracy, 0.5);
}

TEST(Metrics, PerfectCountsGiveOne) {
  EvalReport r;
  r.splits = {split_with("eval_iv", 27, 27), split_with("eval_oov", 18, 18)};
  r.finalize();
  for (const auto& [k, v] : r.metrics()) EXPECT_DOUBLE_EQ(v, 1.0) << k;
}

TEST(Metrics, EmptySplitIsReportedButExcluded) {
  EvalReport r;
  r.splits = {split_with("eval_iv", 10, 5), SplitResult{"eval_oov", {}, std::string("split eval_oov is empty")}};
  r.finalize();
  EXPECT_DOUBLE_EQ(r.average, 0.5);
  EXPECT_DOUBLE_EQ(r.weighted_average, 0.5);
  const auto j = r.to_json();
  EXPECT_TRUE(j["splits"][1].contains("error"));
}

TEST(Metrics, DeltasAgainstBaseline) {
  EvalReport a;
  a.model = "base";
  a.splits = {split_with("eval_iv", 10, 5)};
  a.finalize();
  EvalReport b;
  b.model = "clipter";
  b.splits = {split_with("eval_iv", 10, 8)};
  b.finalize();
  b.compare_to(a);
  EXPECT_EQ(b.baseline, "base");
  EXPECT_NEAR(b.deltas.at("weighted_average"), 0.3, 1e-12);
}

TEST(Evaluate, EmptyOovSplitStillReportsIv) {
  Fixture f;
  auto ds = f.ds;
  std::erase_if(ds.scenes, [](const data::SceneSample& s) { return s.vocab == data::VocabFlag::oov; });
  const auto r = evaluate(f.base_state, f.base, ds, nullptr);
  ASSERT_EQ(r.splits.size(), 2u);
  EXPECT_FALSE(r.splits[0].error.has_value());
  EXPECT_EQ(r.splits[0].counts.total(), 54u);
  EXPECT_TRUE(r.splits[1].error.has_value());
  for (const auto& [k, v] : r.metrics()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Evaluate, Deterministic) {
  Fixture f;
  encoder::FeatureSource src(*f.enc, encoder::PoolKernel::infinite());
  const auto a = evaluate(f.clip_state, f.clip, f.ds, &src).to_json();
  const auto b = evaluate(f.clip_state, f.clip, f.ds, &src).to_json();
  EXPECT_EQ(a, b);
}

TEST(Pipeline, EncodeOncePerSceneRegardlessOfCropCount) {
  Fixture f;
  std::vector<PipelineScene> scenes;
  for (const auto* s : f.ds.select(data::Split::eval)) {
    auto p = detect_ground_truth(*s);
    auto doubled = p;
    doubled.boxes.insert(doubled.boxes.end(), p.boxes.begin(), p.boxes.end());
    scenes.push_back(p);
    scenes.push_back(doubled);
  }
  const auto res = run_pipeline(scenes, f.clip_state, f.clip, f.enc.get());
  ASSERT_EQ(res.trace.scenes.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& t = res.trace.scenes[i];
    EXPECT_EQ(t.encoder_invocations, 1u);
    EXPECT_EQ(t.crops, scenes[i].boxes.size());
    EXPECT_EQ(t.fusion_invocations, scenes[i].boxes.size());
  }
  EXPECT_EQ(f.enc->invocations(), scenes.size());
}

TEST(Pipeline, BaselineNeverEncodes) {
  Fixture f;
  std::vector<PipelineScene> scenes;
  for (const auto* s : f.ds.select(data::Split::eval)) scenes.push_back(detect_ground_truth(*s));
  const auto res = run_pipeline(scenes, f.base_state, f.base, f.enc.get());
  for (const auto& t : res.trace.scenes) {
    EXPECT_EQ(t.encoder_invocations, 0u);
    EXPECT_EQ(t.fusion_invocations, 0u);
    EXPECT_EQ(t.fusion_flops, 0u);
  }
  EXPECT_EQ(f.enc->invocations(), 0u);
}

TEST(Pipeline, OutOfBoundsBoxIsPerCropError) {
  Fixture f;
  const auto* s = f.ds.select(data::Split::eval).front();
  auto p = detect_ground_truth(*s);
  p.boxes.insert(p.boxes.begin() + 2, data::Box{90, 90, 32, 8});
  const auto res = run_pipeline({p}, f.clip_state, f.clip, f.enc.get());
  const auto& preds = res.predictions.front();
  ASSERT_EQ(preds.size(), p.boxes.size());
  EXPECT_TRUE(preds[2].error.has_value());
  EXPECT_EQ(res.trace.scenes[0].crop_errors, 1u);
  EXPECT_EQ(res.trace.scenes[0].encoder_invocations, 1u);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (i != 2) EXPECT_FALSE(preds[i].error.has_value());
  }
}

TEST(Pipeline, MatchesOfflineRecognitionBitForBit) {
  for (auto point : {rec::IntegrationPoint::vision, rec::IntegrationPoint::decoder}) {
    Fixture f(point);
    encoder::FeatureSource src(*f.enc, encoder::PoolKernel::infinite());
    for (const auto* s : f.ds.select(data::Split::eval)) {
      const auto res = run_pipeline({detect_ground_truth(*s)}, f.clip_state, f.clip, f.enc.get());
      std::vector<MatF> crops;
      for (const auto& w : s->words) crops.push_back(data::crop(s->pixels, w.box));
      std::vector<const MatF*> ptrs;
      for (const auto& c : crops) ptrs.push_back(&c);
      const MatF global = src.get(*s).tokens;
      const auto offline = recognize_batch(f.clip_state, f.clip, ptrs, &global);
      const auto& online = res.predictions.front();
      ASSERT_EQ(offline.size(), online.size());
      for (std::size_t i = 0; i < offline.size(); ++i) {
        ASSERT_EQ(offline[i].logits.rows(), online[i].logits.rows());
        EXPECT_EQ(0, std::memcmp(offline[i].logits.data(), online[i].logits.data(),
                                 sizeof(float) * static_cast<std::size_t>(offline[i].logits.size())));
        EXPECT_EQ(offline[i].text, online[i].text);
      }
    }
  }
}

TEST(Pipeline, FusionFlopsFollowCostModel) {
  Fixture f;
  const auto* s = f.ds.select(data::Split::eval).front();
  const auto res = run_pipeline({detect_ground_truth(*s)}, f.clip_state, f.clip, f.enc.get());
  const auto per_call = fusion::estimate_flops(f.clip.clipter->fusion, 8, 1, 48).total_flops();
  EXPECT_EQ(res.trace.scenes[0].fusion_flops, per_call * s->words.size());
}

TEST(Pipeline, TimingRepeatsKeepCounts) {
  Fixture f;
  const auto* s = f.ds.select(data::Split::eval).front();
  const auto res = run_pipeline({detect_ground_truth(*s)}, f.clip_state, f.clip, f.enc.get(), {1, 3});
  EXPECT_EQ(res.trace.scenes[0].encoder_invocations, 1u);
  EXPECT_GT(res.trace.scenes[0].total_seconds, 0.0);
  EXPECT_GT(res.trace.fps(), 0.0);
}

TEST(Overhead, SelfComparisonIsZero) {
  const auto t = synthetic_trace({0.1, 0.2, 0.15});
  const auto o = overhead_report(t, t);
  EXPECT_DOUBLE_EQ(o.ratio, 0.0);
  EXPECT_DOUBLE_EQ(o.delta, 0.0);
}

TEST(Overhead, TenMillisecondsOnHundred) {
  const auto o = overhead_report(synthetic_trace({0.1, 0.1, 0.1}), synthetic_trace({0.11, 0.11, 0.11}));
  EXPECT_NEAR(o.ratio, 0.10, 1e-9);
  EXPECT_NEAR(o.delta, 0.01, 1e-12);
}

TEST(Overhead, MismatchedScenesRejected) {
  EXPECT_THROW(overhead_report(synthetic_trace({0.1, 0.1}), synthetic_trace({0.1, 0.1, 0.1})), std::invalid_argument);
}
