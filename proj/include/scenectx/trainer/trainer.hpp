#pragma once

#include "scenectx/datagen/dataset.hpp"
#include "scenectx/diffcore/params.hpp"
#include "scenectx/global_encoder/cache.hpp"
#include "scenectx/recognizers/recognizer.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace scenectx::train {

using diff::ModelState;

enum class Phase { pretrain_encoder, pretrain_recognizer, finetune_clipter };
std::string to_string(Phase p);
Phase parse_phase(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::pretrain_recognizer;
  int epochs = 20;
  double lr = 1e-3;       // pretraining rate; fine-tuning uses clipter.lr * lr_scale
  int batch = 32;         // crops per step
  double fraction = 1.0;  // of the training scenes, nested per seed
  std::uint64_t seed = 1;
  int extra_crops = 2;    // non-target words per training scene and epoch
  double lr_scale = 10.0;
  std::optional<rec::ClipterConfig> clipter;  // finetune only
  bool use_cache = true;
  std::string cache_path;   // empty: in-memory cache
  std::string record_path;  // RunRecord JSONL, appended after every epoch; empty: not written

  double effective_lr() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
  double val_corrupted_accuracy = 0.0;
  double val_uncorrupted_accuracy = 0.0;
  double tanh_alpha = 0.0;      // at the end of the epoch; 0 without clipter
  double iter_seconds = 0.0;    // median per training iteration
  std::size_t iterations = 0;
  std::size_t cache_hits = 0;   // training pass only
  std::size_t cache_misses = 0;
  std::size_t encoder_calls = 0;
  double cache_hit_rate() const;
  nlohmann::json to_json() const;
};

/// Per-epoch log; each append is written as one JSON line when a path is set.
class RunRecord {
 public:
  RunRecord() = default;
  RunRecord(std::string path, Phase phase, double initial_tanh_alpha);

  void append(const EpochRecord& e);
  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  double initial_tanh_alpha() const { return initial_tanh_alpha_; }
  std::vector<double> tanh_alpha_trajectory() const;  // initial value first

 private:
  void write_line(const nlohmann::json& j) const;

  std::string path_;
  double initial_tanh_alpha_ = 0.0;
  std::vector<EpochRecord> epochs_;
};

struct TrainResult {
  ModelState state;  // best checkpoint
  rec::ModelSpec spec;
  RunRecord record;
  int best_epoch = 0;
  double best_val = 0.0;  // the selection metric at best_epoch
  std::vector<std::string> warnings;
};

/// Deterministic nested subset: the first ceil(fraction * n) scenes of a
/// seeded permutation. Throws ConfigError when fewer than min_scenes remain.
std::vector<const data::SceneSample*> subsample(const std::vector<const data::SceneSample*>& scenes, double fraction,
                                                std::uint64_t seed, std::size_t min_scenes);

/// Crop-only recognizer trained with character cross-entropy; keeps the epoch
/// with the best validation word accuracy. Throws diff::TrainingError on
/// divergence.
TrainResult pretrain_recognizer(const TrainConfig& config, const rec::RecognizerConfig& rec_config,
                                const data::Dataset& ds);

/// Fine-tuning step-0 state: the baseline's rec.* parameters (unfrozen) plus
/// freshly initialized fusion parameters with alpha = 0.
ModelState warm_start(const ModelState& baseline, const rec::ModelSpec& spec, std::uint64_t seed);

/// Warm-starts from baseline (rec.* only), attaches fresh fusion parameters
/// with alpha = 0 and trains recognizer + fusion with the encoder frozen.
/// Global features come from the cache (filled during epoch 1) or, with
/// use_cache off, from a fresh encode per use. Keeps the epoch with the best
/// validation corrupted-word accuracy.
TrainResult finetune_clipter(const TrainConfig& config, const ModelState& baseline, const rec::ModelSpec& baseline_spec,
                             const encoder::SceneEncoder& encoder, const data::Dataset& ds);

struct SweepRow {
  double fraction = 0.0;
  std::uint64_t seed = 0;
  double baseline_corrupted = 0.0;
  double clipter_corrupted = 0.0;
  double baseline_accuracy = 0.0;  // all eval words
  double clipter_accuracy = 0.0;
  double gap() const { return clipter_corrupted - baseline_corrupted; }
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::size_t runs = 0;
  /// Mean corrupted-word gap per fraction, over seeds.
  std::vector<std::pair<double, double>> mean_gap() const;
  std::string to_tsv() const;  // fraction, seed, accuracies, error rates, gap
  static SweepTable from_tsv(const std::string& text);
};

/// Per fraction and seed: pretrain a baseline on the subset, fine-tune
/// the fusion model from it, evaluate both on the eval split. With match_iterations
/// both phases run ceil(epochs / fraction) epochs, so every fraction gets
/// about the same number of optimizer steps.
SweepTable lowdata_sweep(const std::vector<double>& fractions, const std::vector<std::uint64_t>& seeds,
                         const TrainConfig& pretrain, const TrainConfig& finetune,
                         const rec::RecognizerConfig& rec_config, const encoder::SceneEncoder& encoder,
                         const data::Dataset& ds, bool match_iterations = false);

}  // namespace scenectx::train
