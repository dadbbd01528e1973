#include "scenectx/evaluator/evaluator.hpp"

#include "scenectx/fusion/cost_model.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <stdexcept>

namespace scenectx::eval {

using nlohmann::json;

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void WordCounts::add(bool corrupted, bool correct) {
  if (corrupted) {
    ++corrupted_total;
    corrupted_correct += correct ? 1 : 0;
  } else {
    ++uncorrupted_total;
    uncorrupted_correct += correct ? 1 : 0;
  }
}

WordCounts& WordCounts::operator+=(const WordCounts& o) {
  corrupted_correct += o.corrupted_correct;
  corrupted_total += o.corrupted_total;
  uncorrupted_correct += o.uncorrupted_correct;
  uncorrupted_total += o.uncorrupted_total;
  return *this;
}

double WordCounts::accuracy() const { return ratio(correct(), total()); }
double WordCounts::corrupted_accuracy() const { return ratio(corrupted_correct, corrupted_total); }
double WordCounts::uncorrupted_accuracy() const { return ratio(uncorrupted_correct, uncorrupted_total); }

std::vector<CropPrediction> recognize_batch(const ModelState& state, const rec::ModelSpec& spec,
                                            const std::vector<const MatF*>& crops, const MatF* global,
                                            rec::RecognizerProbe* probe) {
  if (crops.empty()) return {};
  if (spec.clipter && global == nullptr) throw std::invalid_argument("clipter model needs global features");
  diff::Graph<float> g(&state);
  g.set_grad_enabled(false);
  rec::ForwardRequest req;
  req.crops = crops;
  if (spec.clipter) req.globals.assign(crops.size(), global);
  req.probe = probe;
  const auto r = rec::recognize(g, spec, req);
  std::vector<CropPrediction> out(crops.size());
  for (Index b = 0; b < r.batch; ++b) {
    auto& p = out[static_cast<std::size_t>(b)];
    p.logits = rec::item_logits(r.logits.value(), r.steps, r.batch, b);
    p.text = rec::decode_greedy(p.logits, spec.rec.max_len).text;
  }
  return out;
}

WordCounts score_scenes(const ModelState& state, const rec::ModelSpec& spec,
                        const std::vector<const data::SceneSample*>& scenes, encoder::FeatureSource* globals) {
  if (spec.clipter && globals == nullptr) throw std::invalid_argument("score_scenes: clipter model needs a feature source");
  WordCounts counts;
  for (const auto* s : scenes) {
    std::vector<MatF> crops;
    crops.reserve(s->words.size());
    for (const auto& w : s->words) crops.push_back(data::crop(s->pixels, w.box));
    std::vector<const MatF*> ptrs;
    for (const auto& c : crops) ptrs.push_back(&c);
    MatF global;
    if (spec.clipter) global = globals->get(*s).tokens;
    const auto preds = recognize_batch(state, spec, ptrs, spec.clipter ? &global : nullptr);
    for (std::size_t i = 0; i < preds.size(); ++i) counts.add(s->words[i].corrupted, preds[i].text == s->words[i].text);
  }
  return counts;
}

// ---- report --------------------------------------------------------------

void EvalReport::finalize() {
  WordCounts all;
  double acc_sum = 0.0;
  std::size_t evaluated = 0;
  iv_accuracy = oov_accuracy = iv_corrupted_accuracy = oov_corrupted_accuracy = 0.0;
  for (const auto& s : splits) {
    if (s.error) continue;
    all += s.counts;
    acc_sum += s.accuracy();
    ++evaluated;
    if (s.name == "eval_iv") {
      iv_accuracy = s.accuracy();
      iv_corrupted_accuracy = s.counts.corrupted_accuracy();
    } else if (s.name == "eval_oov") {
      oov_accuracy = s.accuracy();
      oov_corrupted_accuracy = s.counts.corrupted_accuracy();
    }
  }
  average = evaluated == 0 ? 0.0 : acc_sum / static_cast<double>(evaluated);
  weighted_average = all.accuracy();
  corrupted_accuracy = all.corrupted_accuracy();
  uncorrupted_accuracy = all.uncorrupted_accuracy();
}

std::map<std::string, double> EvalReport::metrics() const {
  std::map<std::string, double> m{{"average", average},
                                  {"weighted_average", weighted_average},
                                  {"corrupted_accuracy", corrupted_accuracy},
                                  {"uncorrupted_accuracy", uncorrupted_accuracy},
                                  {"iv_accuracy", iv_accuracy},
                                  {"oov_accuracy", oov_accuracy},
                                  {"iv_corrupted_accuracy", iv_corrupted_accuracy},
                                  {"oov_corrupted_accuracy", oov_corrupted_accuracy}};
  for (const auto& s : splits) {
    if (!s.error) m[s.name + "_accuracy"] = s.accuracy();
  }
  return m;
}

void EvalReport::compare_to(const EvalReport& base) {
  baseline = base.model;
  deltas.clear();
  const auto mine = metrics();
  const auto theirs = base.metrics();
  for (const auto& [k, v] : mine) {
    auto it = theirs.find(k);
    if (it != theirs.end()) deltas[k] = v - it->second;
  }
}

json EvalReport::to_json() const {
  json j;
  j["model"] = model;
  j["splits"] = json::array();
  for (const auto& s : splits) {
    json e{{"name", s.name}};
    if (s.error) {
      e["error"] = *s.error;
    } else {
      e["accuracy"] = s.accuracy();
      e["words"] = s.counts.total();
      e["correct"] = s.counts.correct();
      e["corrupted_accuracy"] = s.counts.corrupted_accuracy();
      e["corrupted_words"] = s.counts.corrupted_total;
      e["uncorrupted_accuracy"] = s.counts.uncorrupted_accuracy();
      e["uncorrupted_words"] = s.counts.uncorrupted_total;
    }
    j["splits"].push_back(e);
  }
  for (const auto& [k, v] : metrics()) j[k] = v;
  if (!baseline.empty()) {
    j["baseline"] = baseline;
    j["deltas"] = deltas;
  }
  return j;
}

EvalReport evaluate(const ModelState& state, const rec::ModelSpec& spec, const data::Dataset& ds,
                    encoder::FeatureSource* globals, const std::string& name) {
  EvalReport report;
  report.model = name;
  const std::pair<const char*, data::VocabFlag> parts[] = {{"eval_iv", data::VocabFlag::iv},
                                                           {"eval_oov", data::VocabFlag::oov}};
  for (const auto& [split_name, flag] : parts) {
    SplitResult r;
    r.name = split_name;
    const auto scenes = ds.select(data::Split::eval, flag);
    if (scenes.empty()) {
      r.error = std::string("split ") + split_name + " is empty";
    } else {
      r.counts = score_scenes(state, spec, scenes, globals);
    }
    report.splits.push_back(std::move(r));
  }
  report.finalize();
  return report;
}

// ---- pipeline ------------------------------------------------------------

PipelineScene detect_ground_truth(const data::SceneSample& scene) {
  PipelineScene p;
  p.scene_id = scene.scene_id;
  p.pixels = &scene.pixels;
  for (const auto& w : scene.words) p.boxes.push_back(w.box);
  return p;
}

Index fusion_local_tokens(const rec::ModelSpec& spec, Index crop_w) {
  if (spec.rec.arch == rec::Arch::vit) return crop_w / spec.rec.patch + spec.rec.max_len;
  if (spec.clipter && spec.clipter->point == rec::IntegrationPoint::decoder) return 1;
  return crop_w / 4;
}

double PipelineTrace::median_seconds() const {
  std::vector<double> t;
  for (const auto& s : scenes) t.push_back(s.total_seconds);
  return median(t);
}

double PipelineTrace::fps() const {
  const double m = median_seconds();
  return m > 0.0 ? 1.0 / m : 0.0;
}

json PipelineTrace::to_json() const {
  json j;
  j["median_seconds"] = median_seconds();
  j["fps"] = fps();
  j["scenes"] = json::array();
  for (const auto& s : scenes) {
    j["scenes"].push_back({{"scene_id", s.scene_id},
                           {"crops", s.crops},
                           {"crop_errors", s.crop_errors},
                           {"encoder_invocations", s.encoder_invocations},
                           {"fusion_invocations", s.fusion_invocations},
                           {"fusion_flops", s.fusion_flops},
                           {"encode_seconds", s.encode_seconds},
                           {"recognize_seconds", s.recognize_seconds},
                           {"total_seconds", s.total_seconds}});
  }
  return j;
}

PipelineResult run_pipeline(const std::vector<PipelineScene>& scenes, const ModelState& state, const rec::ModelSpec& spec,
                            const encoder::SceneEncoder* encoder, const PipelineOptions& options) {
  if (spec.clipter && encoder == nullptr) throw std::invalid_argument("run_pipeline: clipter model needs an encoder");
  if (options.repeats < 1 || options.warmup < 0) throw ConfigError("run_pipeline: repeats must be positive");
  const encoder::PoolKernel k = spec.clipter ? spec.clipter->pool : encoder::PoolKernel::infinite();
  PipelineResult result;
  for (const auto& scene : scenes) {
    std::vector<CropPrediction> preds;
    SceneTrace trace;
    trace.scene_id = scene.scene_id;
    trace.crops = scene.boxes.size();
    std::vector<double> totals;
    std::vector<double> encodes;
    std::vector<double> recs;
    for (int run = 0; run < options.warmup + options.repeats; ++run) {
      const bool counted = run == options.warmup;
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t enc_before = encoder != nullptr ? encoder->invocations() : 0;
      MatF global;
      if (spec.clipter) global = encoder::pool_features(encoder->encode(*scene.pixels), k).tokens;
      const double t_encode = seconds_since(t0);

      std::vector<CropPrediction> out(scene.boxes.size());
      std::vector<MatF> crops;
      std::vector<std::size_t> valid;
      for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        out[i].box = scene.boxes[i];
        try {
          crops.push_back(data::crop(*scene.pixels, scene.boxes[i]));
          valid.push_back(i);
        } catch (const std::out_of_range& e) {
          out[i].error = e.what();
        }
      }
      const auto t1 = std::chrono::steady_clock::now();
      std::vector<const MatF*> ptrs;
      for (const auto& c : crops) ptrs.push_back(&c);
      rec::RecognizerProbe probe;
      auto recognized = recognize_batch(state, spec, ptrs, spec.clipter ? &global : nullptr, &probe);
      for (std::size_t j = 0; j < valid.size(); ++j) {
        out[valid[j]] = std::move(recognized[j]);
        out[valid[j]].box = scene.boxes[valid[j]];
      }
      const double t_rec = seconds_since(t1);
      const double t_total = seconds_since(t0);

      if (counted) {
        trace.encoder_invocations = encoder != nullptr ? encoder->invocations() - enc_before : 0;
        trace.crop_errors = scene.boxes.size() - valid.size();
        trace.fusion_invocations = probe.total();
        if (spec.clipter && !crops.empty()) {
          const auto per_call = fusion::estimate_flops(spec.clipter->fusion,
                                                       static_cast<std::uint64_t>(fusion_local_tokens(spec, crops.front().cols())),
                                                       static_cast<std::uint64_t>(global.rows()),
                                                       static_cast<std::uint64_t>(spec.rec.d_local));
          trace.fusion_flops = per_call.total_flops() * probe.total();
        }
        preds = std::move(out);
      }
      if (run >= options.warmup) {
        totals.push_back(t_total);
        encodes.push_back(t_encode);
        recs.push_back(t_rec);
      }
    }
    trace.total_seconds = median(totals);
    trace.encode_seconds = median(encodes);
    trace.recognize_seconds = median(recs);
    result.predictions.push_back(std::move(preds));
    result.trace.scenes.push_back(trace);
  }
  return result;
}

json Overhead::to_json() const {
  return {{"baseline_median_seconds", baseline_median},
          {"clipter_median_seconds", clipter_median},
          {"overhead_ratio", ratio},
          {"overhead_seconds", delta}};
}

Overhead overhead_report(const PipelineTrace& baseline, const PipelineTrace& clipter) {
  std::multiset<std::uint64_t> a;
  std::multiset<std::uint64_t> b;
  for (const auto& s : baseline.scenes) a.insert(s.scene_id);
  for (const auto& s : clipter.scenes) b.insert(s.scene_id);
  if (a != b) throw std::invalid_argument("overhead_report: traces cover different scene sets");
  if (a.empty()) throw std::invalid_argument("overhead_report: empty traces");
  Overhead o;
  o.baseline_median = baseline.median_seconds();
  o.clipter_median = clipter.median_seconds();
  o.ratio = o.baseline_median > 0.0 ? o.clipter_median / o.baseline_median - 1.0 : 0.0;
  o.delta = o.clipter_median - o.baseline_median;
  return o;
}

}  // namespace scenectx::eval
