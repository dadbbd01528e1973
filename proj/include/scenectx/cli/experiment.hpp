#pragma once

#include "scenectx/datagen/dataset.hpp"
#include "scenectx/global_encoder/encoder.hpp"
#include "scenectx/recognizers/recognizer.hpp"
#include "scenectx/trainer/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenectx::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitInvariant = 2;
inline constexpr int kExitNumeric = 3;

/// A command's input is missing; names the command that produces it.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& producer)
      : std::runtime_error("missing " + path.string() + "; run `" + producer + "` first"), producer_(producer) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

/// A hard invariant failed on real outputs (exit code 2).
class InvariantError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::string name = "default";
  std::uint64_t seed = 7;  // master seed; --seed also resets the per-phase seeds
  int contexts = 4;
  int iv_stems = 150;
  int oov_stems = 50;
  bool words_only = false;
  data::DatasetCounts counts;
  encoder::EncoderConfig encoder;
  encoder::EncoderTrainConfig encoder_train;
  rec::RecognizerConfig recognizer;
  train::TrainConfig pretrain;
  train::TrainConfig finetune;
  std::vector<double> sweep_fractions{0.1, 1.0};
  std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
  bool sweep_match_iterations = true;  // epochs / fraction per run
  int bench_scenes = 100;
  int bench_warmup = 1;
  int bench_repeats = 3;

  ExperimentConfig();
  void set_master_seed(std::uint64_t s);
  nlohmann::json to_json() const;
  /// Keys absent from j keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Output root: explicit path, else $SCENECTX_OUT/<name>, else runs/<name>.
std::filesystem::path resolve_output_dir(const std::string& explicit_out, const std::string& name);

/// defaults <- saved <dir>/config.json <- config file <- flag patch (flags win).
ExperimentConfig layer_config(const std::filesystem::path& dir, const std::string& config_file,
                              const nlohmann::json& flag_patch);

/// One experiment directory.
///
///   config.json                 merged config, written before any work
///   data/                       spec.json, manifest.jsonl, images/
///   encoder/encoder.ckpt        frozen scene encoder (+ run.json)
///   baseline/recognizer.ckpt    crop-only recognizer (+ run.jsonl)
///   clipter/recognizer.ckpt     fine-tuned recognizer with fusion (+ run.jsonl)
///   cache/globals_k<k>.cltc     pooled global features
///   eval/{baseline,clipter}.json, eval/table.tsv
///   bench/{baseline_trace,clipter_trace,overhead}.json
///   sweep/table.tsv, plots/lowdata.svg
///   stamps/<command>.json       input key + output checksums
class Experiment {
 public:
  Experiment(std::filesystem::path dir, ExperimentConfig config, bool force, std::ostream& log);

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path path(const std::string& rel) const { return dir_ / rel; }
  std::filesystem::path cache_file() const;

  void persist_config() const;

  // Each returns false when skipped as up to date.
  bool gen_data();
  bool pretrain_encoder();
  bool pretrain_recognizer();
  bool finetune();
  bool precompute_cache();
  bool eval();
  bool pipeline_bench();
  bool sweep_lowdata();
  bool plot();

  data::Dataset load_dataset() const;
  encoder::SceneEncoder load_encoder() const;
  /// Recognizer checkpoint plus the model spec stored in its metadata.
  std::pair<diff::ModelState, rec::ModelSpec> load_recognizer(const std::string& which) const;

 private:
  std::string dataset_sum() const;
  std::string file_sum(const std::string& rel, const std::string& producer) const;
  bool up_to_date(const std::string& command, const std::string& key) const;
  void stamp(const std::string& command, const std::string& key, const std::vector<std::string>& outputs) const;

  std::filesystem::path dir_;
  ExperimentConfig config_;
  bool force_;
  std::ostream& log_;
};

struct FlopsQuery {
  std::string mechanism = "mhca";
  std::string preset = "mini";
  Index n_local = 26;
  Index n_global = 17;
  Index d = 256;
  Index d_global = 0;  // 0: same as d
};
nlohmann::json flops_report(const FlopsQuery& q);

/// Log-log error-rate-vs-fraction chart (mean over seeds) as SVG text.
std::string lowdata_svg(const train::SweepTable& table);

}  // namespace scenectx::cli
