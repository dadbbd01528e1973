#pragma once

#include "scenectx/datagen/dataset.hpp"
#include "scenectx/global_encoder/cache.hpp"
#include "scenectx/recognizers/recognizer.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace scenectx::eval {

using diff::ModelState;

/// Exact-match word counts, split by the corrupted flag.
struct WordCounts {
  std::size_t corrupted_correct = 0;
  std::size_t corrupted_total = 0;
  std::size_t uncorrupted_correct = 0;
  std::size_t uncorrupted_total = 0;

  void add(bool corrupted, bool correct);
  WordCounts& operator+=(const WordCounts& o);
  std::size_t correct() const { return corrupted_correct + uncorrupted_correct; }
  std::size_t total() const { return corrupted_total + uncorrupted_total; }
  double accuracy() const;
  double corrupted_accuracy() const;
  double uncorrupted_accuracy() const;
};

/// Recognizes every word of every scene, one batch per scene. globals is
/// required iff the spec has a clipter attachment.
WordCounts score_scenes(const ModelState& state, const rec::ModelSpec& spec,
                        const std::vector<const data::SceneSample*>& scenes, encoder::FeatureSource* globals);

struct SplitResult {
  std::string name;
  WordCounts counts;
  std::optional<std::string> error;  // set for empty splits; excluded from averages
  double accuracy() const { return counts.accuracy(); }
};

/// average = mean of per-split word accuracies; weighted_average = total
/// correct / total words over the splits that were evaluated.
struct EvalReport {
  std::string model;
  std::vector<SplitResult> splits;
  double average = 0.0;
  double weighted_average = 0.0;
  double corrupted_accuracy = 0.0;
  double uncorrupted_accuracy = 0.0;
  double iv_accuracy = 0.0;
  double oov_accuracy = 0.0;
  double iv_corrupted_accuracy = 0.0;
  double oov_corrupted_accuracy = 0.0;
  std::string baseline;                  // name of the report the deltas refer to
  std::map<std::string, double> deltas;  // metric -> this - baseline

  /// Recomputes every aggregate from splits. IV/OOV read the splits named
  /// "eval_iv" and "eval_oov".
  void finalize();
  void compare_to(const EvalReport& base);
  std::map<std::string, double> metrics() const;
  nlohmann::json to_json() const;
};

/// Evaluates the eval_iv and eval_oov subsets of ds.
EvalReport evaluate(const ModelState& state, const rec::ModelSpec& spec, const data::Dataset& ds,
                    encoder::FeatureSource* globals, const std::string& name = "model");

// ---- pipeline ------------------------------------------------------------

/// One scene as seen by the pipeline: pixels plus detector boxes.
struct PipelineScene {
  std::uint64_t scene_id = 0;
  const MatF* pixels = nullptr;
  std::vector<data::Box> boxes;
};

/// Ground-truth detector stub: the scene's own word boxes.
PipelineScene detect_ground_truth(const data::SceneSample& scene);

struct CropPrediction {
  data::Box box;
  std::string text;
  MatF logits;  // steps x classes
  std::optional<std::string> error;
};

struct SceneTrace {
  std::uint64_t scene_id = 0;
  std::size_t crops = 0;
  std::size_t crop_errors = 0;
  std::size_t encoder_invocations = 0;
  std::size_t fusion_invocations = 0;
  std::uint64_t fusion_flops = 0;
  double encode_seconds = 0.0;
  double recognize_seconds = 0.0;
  double total_seconds = 0.0;  // median over timed repeats
};

struct PipelineTrace {
  std::vector<SceneTrace> scenes;
  double median_seconds() const;
  double fps() const;
  nlohmann::json to_json() const;
};

struct PipelineOptions {
  int warmup = 0;   // untimed runs per scene
  int repeats = 1;  // timed runs per scene; the median is kept
};

struct PipelineResult {
  std::vector<std::vector<CropPrediction>> predictions;
  PipelineTrace trace;
};

/// Per scene: encode once (when the spec has a clipter attachment), crop
/// every box, recognize all valid crops in one batch reusing the pooled
/// global feature. Out-of-bounds boxes become per-crop errors.
PipelineResult run_pipeline(const std::vector<PipelineScene>& scenes, const ModelState& state, const rec::ModelSpec& spec,
                            const encoder::SceneEncoder* encoder, const PipelineOptions& options = {});

/// Greedy logits and transcripts for a batch of crops sharing one global feature.
std::vector<CropPrediction> recognize_batch(const ModelState& state, const rec::ModelSpec& spec,
                                            const std::vector<const MatF*>& crops, const MatF* global,
                                            rec::RecognizerProbe* probe = nullptr);

/// Local tokens entering one fusion invocation for a crop of width w.
Index fusion_local_tokens(const rec::ModelSpec& spec, Index crop_w);

struct Overhead {
  double baseline_median = 0.0;
  double clipter_median = 0.0;
  double ratio = 0.0;     // clipter_median / baseline_median - 1
  double delta = 0.0;     // seconds
  nlohmann::json to_json() const;
};

/// Throws std::invalid_argument when the traces cover different scenes.
Overhead overhead_report(const PipelineTrace& baseline, const PipelineTrace& clipter);

}  // namespace scenectx::eval
