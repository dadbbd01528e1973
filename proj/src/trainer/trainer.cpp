#include "scenectx/trainer/trainer.hpp"

#include "scenectx/diffcore/ops.hpp"
#include "scenectx/diffcore/optimizer.hpp"
#include "scenectx/evaluator/evaluator.hpp"
#include "scenectx/util/seed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace scenectx::train {

using nlohmann::json;

std::string to_string(Phase p) {
  switch (p) {
    case Phase::pretrain_encoder: return "pretrain_encoder";
    case Phase::pretrain_recognizer: return "pretrain_recognizer";
    case Phase::finetune_clipter: return "finetune_clipter";
  }
  return "?";
}

Phase parse_phase(const std::string& s) {
  if (s == "pretrain_encoder") return Phase::pretrain_encoder;
  if (s == "pretrain_recognizer") return Phase::pretrain_recognizer;
  if (s == "finetune_clipter") return Phase::finetune_clipter;
  throw ConfigError("unknown training phase: " + s);
}

// ---- config --------------------------------------------------------------

double TrainConfig::effective_lr() const {
  if (phase == Phase::finetune_clipter && clipter) return clipter->lr * lr_scale;
  return lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch < 1) throw ConfigError("batch size must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
  if (extra_crops < 0) throw ConfigError("extra_crops must be non-negative");
  if (!(effective_lr() > 0.0)) throw ConfigError("learning rate must be positive");
  if (phase == Phase::finetune_clipter && !clipter) throw ConfigError("fine-tuning needs a fusion config");
  if (phase != Phase::finetune_clipter && clipter) throw ConfigError("pretraining takes no fusion config");
}

json TrainConfig::to_json() const {
  json j{{"phase", to_string(phase)}, {"epochs", epochs},           {"lr", lr},
         {"batch", batch},            {"fraction", fraction},       {"seed", seed},
         {"extra_crops", extra_crops}, {"lr_scale", lr_scale},      {"use_cache", use_cache}};
  if (clipter) j["clipter"] = clipter->to_json();
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.phase = parse_phase(j.value("phase", to_string(c.phase)));
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.fraction = j.value("fraction", c.fraction);
  c.seed = j.value("seed", c.seed);
  c.extra_crops = j.value("extra_crops", c.extra_crops);
  c.lr_scale = j.value("lr_scale", c.lr_scale);
  c.use_cache = j.value("use_cache", c.use_cache);
  if (j.contains("clipter")) c.clipter = rec::ClipterConfig::from_json(j.at("clipter"));
  return c;
}

// ---- run record ----------------------------------------------------------

double EpochRecord::cache_hit_rate() const {
  const auto n = cache_hits + cache_misses;
  return n == 0 ? 0.0 : static_cast<double>(cache_hits) / static_cast<double>(n);
}

json EpochRecord::to_json() const {
  return {{"event", "epoch"},
          {"epoch", epoch},
          {"loss", loss},
          {"val_accuracy", val_accuracy},
          {"val_corrupted_accuracy", val_corrupted_accuracy},
          {"val_uncorrupted_accuracy", val_uncorrupted_accuracy},
          {"tanh_alpha", tanh_alpha},
          {"iter_seconds", iter_seconds},
          {"iterations", iterations},
          {"cache_hits", cache_hits},
          {"cache_misses", cache_misses},
          {"cache_hit_rate", cache_hit_rate()},
          {"encoder_calls", encoder_calls}};
}

RunRecord::RunRecord(std::string path, Phase phase, double initial_tanh_alpha)
    : path_(std::move(path)), initial_tanh_alpha_(initial_tanh_alpha) {
  if (path_.empty()) return;
  std::ofstream(path_, std::ios::trunc);
  write_line({{"event", "start"}, {"phase", to_string(phase)}, {"tanh_alpha", initial_tanh_alpha_}});
}

void RunRecord::write_line(const json& j) const {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("cannot append to run record " + path_);
}

void RunRecord::append(const EpochRecord& e) {
  if (!epochs_.empty() && e.epoch <= epochs_.back().epoch) throw std::logic_error("run record epochs must increase");
  epochs_.push_back(e);
  write_line(e.to_json());
}

std::vector<double> RunRecord::tanh_alpha_trajectory() const {
  std::vector<double> t{initial_tanh_alpha_};
  for (const auto& e : epochs_) t.push_back(e.tanh_alpha);
  return t;
}

// ---- shared loop ---------------------------------------------------------

std::vector<const data::SceneSample*> subsample(const std::vector<const data::SceneSample*>& scenes, double fraction,
                                                std::uint64_t seed, std::size_t min_scenes) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must lie in (0, 1]");
  std::vector<const data::SceneSample*> order = scenes;
  nn::Rng rng(util::mix_seed(seed, 0x73756273));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scenes.size()) - 1e-9));
  if (n < std::max<std::size_t>(min_scenes, 1)) {
    throw ConfigError("data fraction " + std::to_string(fraction) + " leaves " + std::to_string(n) +
                      " training scenes, less than one batch");
  }
  order.resize(n);
  return order;
}

namespace {

struct Item {
  const data::SceneSample* scene;
  int word;
};

std::vector<Item> epoch_items(const std::vector<const data::SceneSample*>& scenes, int extra, std::uint64_t seed,
                              int epoch) {
  std::vector<Item> items;
  for (const auto* s : scenes) {
    items.push_back({s, s->target});
    std::vector<int> others;
    for (int i = 0; i < static_cast<int>(s->words.size()); ++i) {
      if (i != s->target) others.push_back(i);
    }
    nn::Rng rng(util::mix_seed(util::mix_seed(seed, static_cast<std::uint64_t>(epoch)), s->scene_id));
    std::shuffle(others.begin(), others.end(), rng);
    for (int i = 0; i < extra && i < static_cast<int>(others.size()); ++i) items.push_back({s, others[i]});
  }
  nn::Rng rng(util::mix_seed(seed, 0x6f72646572ULL + static_cast<std::uint64_t>(epoch)));
  std::shuffle(items.begin(), items.end(), rng);
  return items;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double tanh_alpha(const ModelState& state) {
  const std::string name = std::string(rec::kFusionPrefix) + ".alpha";
  return state.contains(name) ? std::tanh(static_cast<double>(state.at(name).value(0, 0))) : 0.0;
}

bool all_finite(const ModelState& state) {
  for (const auto& p : state) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

struct LoopInputs {
  const TrainConfig& config;
  const rec::ModelSpec& spec;
  const std::vector<const data::SceneSample*>& train;
  const std::vector<const data::SceneSample*>& val;
  encoder::FeatureSource* features;  // null for crop-only models
  encoder::EmbeddingCache* cache;
  const encoder::SceneEncoder* encoder;
  bool select_corrupted;
};

TrainResult run_training(ModelState state, const LoopInputs& in) {
  const auto& cfg = in.config;
  TrainResult result;
  result.spec = in.spec;
  result.record = RunRecord(cfg.record_path, cfg.phase, tanh_alpha(state));
  diff::Adam adam({.lr = cfg.effective_lr()});
  ModelState best = state;
  double best_val = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto items = epoch_items(in.train, cfg.extra_crops, cfg.seed, epoch);
    if (in.cache != nullptr) in.cache->reset_counters();
    const std::size_t enc_before = in.encoder != nullptr ? in.encoder->invocations() : 0;
    double loss_sum = 0.0;
    std::size_t steps = 0;
    std::vector<double> iter_times;

    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<MatF> crops;
      std::vector<std::vector<int>> targets;
      std::map<std::uint64_t, MatF> globals;
      std::vector<std::uint64_t> owners;
      for (std::size_t i = start; i < end; ++i) {
        const auto& it = items[i];
        const auto& w = it.scene->words[static_cast<std::size_t>(it.word)];
        crops.push_back(data::crop(it.scene->pixels, w.box));
        targets.push_back(rec::target_ids(w.text, in.spec.rec.max_len));
        owners.push_back(it.scene->scene_id);
        if (in.features != nullptr && globals.count(it.scene->scene_id) == 0) {
          globals.emplace(it.scene->scene_id, in.features->get(*it.scene).tokens);
        }
      }
      rec::ForwardRequest req;
      for (const auto& c : crops) req.crops.push_back(&c);
      if (in.features != nullptr) {
        for (auto id : owners) req.globals.push_back(&globals.at(id));
      }
      req.mode = rec::DecodeMode::teacher;
      req.targets = targets;
      try {
        diff::Graph<float> g(&state);
        const auto r = rec::recognize(g, in.spec, req);
        std::vector<int> flat;
        for (Index t = 0; t < r.steps; ++t) {
          for (Index b = 0; b < r.batch; ++b) flat.push_back(targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]);
        }
        auto loss = diff::cross_entropy(r.logits, flat);
        const double lv = loss.value()(0, 0);
        if (!std::isfinite(lv)) throw NumericError("cross_entropy");
        g.backward(loss);
        adam.step(state, g.parameter_grads());
        if (!all_finite(state)) throw NumericError("adam");
        loss_sum += lv;
        ++steps;
      } catch (const NumericError& e) {
        throw diff::TrainingError(to_string(cfg.phase) + " diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                                  all_finite(state) ? state : best);
      }
      iter_times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }

    EpochRecord rec_e;
    rec_e.epoch = epoch;
    rec_e.loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
    rec_e.iterations = steps;
    rec_e.iter_seconds = median(iter_times);
    rec_e.tanh_alpha = tanh_alpha(state);
    if (in.cache != nullptr) {
      rec_e.cache_hits = in.cache->hits();
      rec_e.cache_misses = in.cache->misses();
      if (epoch == 1) in.cache->save();
    }
    if (in.encoder != nullptr) rec_e.encoder_calls = in.encoder->invocations() - enc_before;

    double selection = 0.0;
    if (!in.val.empty()) {
      const auto counts = eval::score_scenes(state, in.spec, in.val, in.features);
      rec_e.val_accuracy = counts.accuracy();
      rec_e.val_corrupted_accuracy = counts.corrupted_accuracy();
      rec_e.val_uncorrupted_accuracy = counts.uncorrupted_accuracy();
      selection = in.select_corrupted ? rec_e.val_corrupted_accuracy : rec_e.val_accuracy;
    }
    result.record.append(rec_e);
    if (in.val.empty() || selection > best_val) {
      best_val = selection;
      best = state;
      result.best_epoch = epoch;
    }
  }
  result.best_val = best_val;
  result.state = std::move(best);
  return result;
}

std::size_t min_scenes_for_batch(const TrainConfig& cfg) {
  const auto per_scene = static_cast<std::size_t>(cfg.extra_crops) + 1;
  return (static_cast<std::size_t>(cfg.batch) + per_scene - 1) / per_scene;
}

}  // namespace

TrainResult pretrain_recognizer(const TrainConfig& config, const rec::RecognizerConfig& rec_config,
                                const data::Dataset& ds) {
  config.validate();
  if (config.phase != Phase::pretrain_recognizer) throw ConfigError("pretrain_recognizer: wrong phase in config");
  rec::ModelSpec spec{rec_config, std::nullopt};
  spec.validate();
  const auto all_train = ds.select(data::Split::train);
  if (all_train.empty()) throw std::invalid_argument("pretrain_recognizer: no training scenes");
  const auto train = subsample(all_train, config.fraction, config.seed, min_scenes_for_batch(config));
  const auto val = ds.select(data::Split::val);

  ModelState state;
  nn::Rng rng(util::mix_seed(config.seed, 0x726563));
  rec::add_recognizer(state, rec_config, rng);
  return run_training(std::move(state), {config, spec, train, val, nullptr, nullptr, nullptr, false});
}

ModelState warm_start(const ModelState& baseline, const rec::ModelSpec& spec, std::uint64_t seed) {
  ModelState state = baseline.subset("rec.");
  if (state.empty()) throw ConfigError("warm start: baseline checkpoint has no recognizer parameters");
  state.set_frozen("", false);
  nn::Rng rng(util::mix_seed(seed, 0x636c6970));
  rec::attach_clipter(state, spec, rng);
  return state;
}

TrainResult finetune_clipter(const TrainConfig& config, const ModelState& baseline, const rec::ModelSpec& baseline_spec,
                             const encoder::SceneEncoder& encoder, const data::Dataset& ds) {
  config.validate();
  if (config.phase != Phase::finetune_clipter) throw ConfigError("finetune_clipter: wrong phase in config");
  if (baseline_spec.clipter) throw ConfigError("finetune_clipter: baseline already carries a fusion attachment");
  rec::ModelSpec spec{baseline_spec.rec, config.clipter};
  spec.validate();
  if (spec.clipter->fusion.d_global != encoder.config().dim) {
    throw ConfigError("fusion global width does not match the encoder width");
  }
  const auto all_train = ds.select(data::Split::train);
  if (all_train.empty()) throw std::invalid_argument("finetune_clipter: no training scenes");
  const auto train = subsample(all_train, config.fraction, config.seed, min_scenes_for_batch(config));
  const auto val = ds.select(data::Split::val);

  ModelState state = warm_start(baseline, spec, config.seed);

  std::optional<encoder::EmbeddingCache> cache;
  if (config.use_cache) {
    cache.emplace(config.cache_path, encoder.config().dim, spec.clipter->pool, encoder.fingerprint());
  }
  encoder::FeatureSource source(encoder, spec.clipter->pool, cache ? &*cache : nullptr);
  auto result = run_training(std::move(state), {config, spec, train, val, &source, cache ? &*cache : nullptr, &encoder, true});
  if (cache) {
    cache->save();
    result.warnings = cache->warnings();
  }
  return result;
}

// ---- low-data sweep ------------------------------------------------------

std::vector<std::pair<double, double>> SweepTable::mean_gap() const {
  std::map<double, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    acc[r.fraction].first += r.gap();
    acc[r.fraction].second += 1;
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [f, s] : acc) out.emplace_back(f, s.first / s.second);
  return out;
}

std::string SweepTable::to_tsv() const {
  std::ostringstream out;
  out.precision(17);
  out << "fraction\tseed\tbaseline_corrupted\tclipter_corrupted\tbaseline_accuracy\tclipter_accuracy\t"
         "baseline_error\tclipter_error\tgap\n";
  for (const auto& r : rows) {
    out << r.fraction << '\t' << r.seed << '\t' << r.baseline_corrupted << '\t' << r.clipter_corrupted << '\t'
        << r.baseline_accuracy << '\t' << r.clipter_accuracy << '\t' << 1.0 - r.baseline_corrupted << '\t'
        << 1.0 - r.clipter_corrupted << '\t' << r.gap() << '\n';
  }
  return out.str();
}

SweepTable SweepTable::from_tsv(const std::string& text) {
  SweepTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("fraction\t", 0) != 0) throw std::invalid_argument("not a sweep table");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    SweepRow r;
    double be = 0.0;
    double ce = 0.0;
    double gap = 0.0;
    if (!(row >> r.fraction >> r.seed >> r.baseline_corrupted >> r.clipter_corrupted >> r.baseline_accuracy >>
          r.clipter_accuracy >> be >> ce >> gap)) {
      throw std::invalid_argument("malformed sweep row: " + line);
    }
    t.rows.push_back(r);
  }
  t.runs = 2 * t.rows.size();
  return t;
}

SweepTable lowdata_sweep(const std::vector<double>& fractions, const std::vector<std::uint64_t>& seeds,
                         const TrainConfig& pretrain, const TrainConfig& finetune,
                         const rec::RecognizerConfig& rec_config, const encoder::SceneEncoder& encoder,
                         const data::Dataset& ds, bool match_iterations) {
  if (fractions.empty() || seeds.empty()) throw ConfigError("sweep needs at least one fraction and one seed");
  const auto train = ds.select(data::Split::train);
  for (double f : fractions) {
    subsample(train, f, seeds.front(), min_scenes_for_batch(pretrain));
  }
  SweepTable table;
  for (double f : fractions) {
    for (auto seed : seeds) {
      TrainConfig pc = pretrain;
      pc.fraction = f;
      pc.seed = seed;
      pc.record_path.clear();
      if (match_iterations) pc.epochs = static_cast<int>(std::ceil(pretrain.epochs / f));
      const auto base = pretrain_recognizer(pc, rec_config, ds);
      TrainConfig fc = finetune;
      fc.fraction = f;
      fc.seed = seed;
      fc.record_path.clear();
      if (match_iterations) fc.epochs = static_cast<int>(std::ceil(finetune.epochs / f));
      const auto tuned = finetune_clipter(fc, base.state, base.spec, encoder, ds);
      table.runs += 2;

      std::optional<encoder::EmbeddingCache> cache;
      if (finetune.use_cache) cache.emplace(finetune.cache_path, encoder.config().dim, finetune.clipter->pool, encoder.fingerprint());
      encoder::FeatureSource source(encoder, finetune.clipter->pool, cache ? &*cache : nullptr);
      const auto rb = eval::evaluate(base.state, base.spec, ds, nullptr, "baseline");
      const auto rc = eval::evaluate(tuned.state, tuned.spec, ds, &source, "clipter");
      table.rows.push_back({f, seed, rb.corrupted_accuracy, rc.corrupted_accuracy, rb.weighted_average,
                            rc.weighted_average});
    }
  }
  return table;
}

}  // namespace scenectx::train
