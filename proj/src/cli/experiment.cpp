#include "scenectx/cli/experiment.hpp"

#include "scenectx/diffcore/checkpoint.hpp"
#include "scenectx/evaluator/evaluator.hpp"
#include "scenectx/fusion/cost_model.hpp"
#include "scenectx/global_encoder/cache.hpp"
#include "scenectx/util/digest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace scenectx::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string key_of(const json& j) {
  const auto s = j.dump();
  return util::to_hex(util::sha256(s.data(), s.size()));
}

json encoder_train_json(const encoder::EncoderTrainConfig& c) {
  return {{"epochs", c.epochs}, {"lr", c.lr}, {"batch", c.batch}, {"seed", c.seed}};
}

encoder::EncoderTrainConfig encoder_train_from(const json& j) {
  encoder::EncoderTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace

// ---- config --------------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
  pretrain.phase = train::Phase::pretrain_recognizer;
  pretrain.epochs = 5;
  finetune.phase = train::Phase::finetune_clipter;
  finetune.epochs = 4;
  finetune.clipter = rec::ClipterConfig{};
  set_master_seed(seed);
}

void ExperimentConfig::set_master_seed(std::uint64_t s) {
  seed = s;
  encoder_train.seed = s;
  pretrain.seed = s;
  finetune.seed = s;
}

json ExperimentConfig::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"data",
           {{"contexts", contexts},
            {"iv_stems", iv_stems},
            {"oov_stems", oov_stems},
            {"words_only", words_only},
            {"counts", counts.to_json()}}},
          {"encoder", encoder.to_json()},
          {"encoder_train", encoder_train_json(encoder_train)},
          {"recognizer", recognizer.to_json()},
          {"pretrain", pretrain.to_json()},
          {"finetune", finetune.to_json()},
          {"sweep", {{"fractions", sweep_fractions}, {"seeds", sweep_seeds}, {"match_iterations", sweep_match_iterations}}},
          {"bench", {{"scenes", bench_scenes}, {"warmup", bench_warmup}, {"repeats", bench_repeats}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& patch) {
  const ExperimentConfig defaults;
  json j = defaults.to_json();
  j.merge_patch(patch);
  ExperimentConfig c;
  c.name = j.at("name").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& d = j.at("data");
  c.contexts = d.at("contexts").get<int>();
  c.iv_stems = d.at("iv_stems").get<int>();
  c.oov_stems = d.at("oov_stems").get<int>();
  c.words_only = d.at("words_only").get<bool>();
  c.counts = data::DatasetCounts::from_json(d.at("counts"));
  c.encoder = encoder::EncoderConfig::from_json(j.at("encoder"));
  c.encoder.classes = c.contexts;
  c.encoder_train = encoder_train_from(j.at("encoder_train"));
  c.recognizer = rec::RecognizerConfig::from_json(j.at("recognizer"));
  c.pretrain = train::TrainConfig::from_json(j.at("pretrain"));
  c.finetune = train::TrainConfig::from_json(j.at("finetune"));
  c.sweep_fractions = j.at("sweep").at("fractions").get<std::vector<double>>();
  c.sweep_seeds = j.at("sweep").at("seeds").get<std::vector<std::uint64_t>>();
  c.sweep_match_iterations = j.at("sweep").at("match_iterations").get<bool>();
  c.bench_scenes = j.at("bench").at("scenes").get<int>();
  c.bench_warmup = j.at("bench").at("warmup").get<int>();
  c.bench_repeats = j.at("bench").at("repeats").get<int>();
  if (c.pretrain.phase != train::Phase::pretrain_recognizer) throw ConfigError("pretrain.phase must be pretrain_recognizer");
  if (c.finetune.phase != train::Phase::finetune_clipter) throw ConfigError("finetune.phase must be finetune_clipter");
  c.encoder.validate();
  c.recognizer.validate();
  c.pretrain.validate();
  c.finetune.validate();
  c.finetune.clipter->validate(c.recognizer);
  return c;
}

fs::path resolve_output_dir(const std::string& explicit_out, const std::string& name) {
  if (!explicit_out.empty()) return explicit_out;
  if (const char* root = std::getenv("SCENECTX_OUT"); root != nullptr && *root != '\0') return fs::path(root) / name;
  return fs::path("runs") / name;
}

ExperimentConfig layer_config(const fs::path& dir, const std::string& config_file, const json& flag_patch) {
  json merged = json::object();
  if (fs::exists(dir / "config.json")) merged.merge_patch(read_json(dir / "config.json"));
  if (!config_file.empty()) merged.merge_patch(read_json(config_file));
  merged.merge_patch(flag_patch);
  return ExperimentConfig::from_json(merged);
}

// ---- experiment ----------------------------------------------------------

Experiment::Experiment(fs::path dir, ExperimentConfig config, bool force, std::ostream& log)
    : dir_(std::move(dir)), config_(std::move(config)), force_(force), log_(log) {}

fs::path Experiment::cache_file() const {
  return dir_ / "cache" / ("globals_k" + config_.finetune.clipter->pool.str() + ".cltc");
}

void Experiment::persist_config() const { write_json(dir_ / "config.json", config_.to_json()); }

std::string Experiment::dataset_sum() const {
  if (!fs::exists(dir_ / "data" / "manifest.jsonl")) throw MissingArtifact(dir_ / "data", "gen-data");
  return data::dataset_checksum((dir_ / "data").string());
}

std::string Experiment::file_sum(const std::string& rel, const std::string& producer) const {
  if (!fs::exists(dir_ / rel)) throw MissingArtifact(dir_ / rel, producer);
  return util::sha256_file((dir_ / rel).string());
}

bool Experiment::up_to_date(const std::string& command, const std::string& key) const {
  if (force_) return false;
  const auto p = dir_ / "stamps" / (command + ".json");
  if (!fs::exists(p)) return false;
  const auto s = read_json(p);
  if (s.value("key", "") != key) return false;
  for (const auto& [rel, sum] : s.at("outputs").items()) {
    const auto full = dir_ / rel;
    if (!fs::exists(full)) return false;
    const auto actual = fs::is_directory(full) ? data::dataset_checksum(full.string()) : util::sha256_file(full.string());
    if (actual != sum.get<std::string>()) return false;
  }
  log_ << command << ": up to date (use --force to rerun)\n";
  return true;
}

void Experiment::stamp(const std::string& command, const std::string& key, const std::vector<std::string>& outputs) const {
  json out = json::object();
  for (const auto& rel : outputs) {
    const auto full = dir_ / rel;
    out[rel] = fs::is_directory(full) ? data::dataset_checksum(full.string()) : util::sha256_file(full.string());
  }
  write_json(dir_ / "stamps" / (command + ".json"), {{"key", key}, {"outputs", out}});
}

data::Dataset Experiment::load_dataset() const {
  if (!fs::exists(dir_ / "data" / "manifest.jsonl")) throw MissingArtifact(dir_ / "data", "gen-data");
  return data::read_dataset((dir_ / "data").string());
}

encoder::SceneEncoder Experiment::load_encoder() const {
  const auto p = dir_ / "encoder" / "encoder.ckpt";
  if (!fs::exists(p)) throw MissingArtifact(p, "pretrain-encoder");
  auto ck = diff::load_checkpoint(p.string());
  return encoder::SceneEncoder(encoder::EncoderConfig::from_json(ck.meta.at("encoder")), std::move(ck.state));
}

std::pair<diff::ModelState, rec::ModelSpec> Experiment::load_recognizer(const std::string& which) const {
  const auto p = dir_ / which / "recognizer.ckpt";
  if (!fs::exists(p)) throw MissingArtifact(p, which == "clipter" ? "finetune" : "pretrain-recognizer");
  auto ck = diff::load_checkpoint(p.string());
  return {std::move(ck.state), rec::ModelSpec::from_json(ck.meta.at("model_spec"))};
}

bool Experiment::gen_data() {
  persist_config();
  const json key{{"seed", config_.seed},         {"contexts", config_.contexts},   {"iv_stems", config_.iv_stems},
                 {"oov_stems", config_.oov_stems}, {"words_only", config_.words_only}, {"counts", config_.counts.to_json()}};
  if (up_to_date("gen-data", key_of(key))) return false;
  const auto spec = data::ContextSpec::generate(config_.contexts, config_.iv_stems, config_.oov_stems, config_.seed,
                                                config_.words_only);
  const auto ds = data::generate_dataset(spec, config_.counts, config_.seed);
  fs::remove_all(dir_ / "data");
  data::write_dataset(ds, (dir_ / "data").string());
  stamp("gen-data", key_of(key), {"data"});
  log_ << "gen-data: " << ds.scenes.size() << " scenes, checksum " << dataset_sum() << "\n";
  return true;
}

bool Experiment::pretrain_encoder() {
  persist_config();
  const json key{{"encoder", config_.encoder.to_json()},
                 {"train", encoder_train_json(config_.encoder_train)},
                 {"data", dataset_sum()}};
  if (up_to_date("pretrain-encoder", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto r = encoder::pretrain_encoder(ds, config_.encoder, config_.encoder_train);
  fs::create_directories(dir_ / "encoder");
  diff::save_checkpoint((dir_ / "encoder" / "encoder.ckpt").string(), r.state,
                        {{"encoder", config_.encoder.to_json()}, {"val_accuracy", r.val_accuracy}});
  write_json(dir_ / "encoder" / "run.json",
             {{"epoch_loss", r.epoch_loss}, {"epoch_val_accuracy", r.epoch_val_accuracy}, {"val_accuracy", r.val_accuracy}});
  stamp("pretrain-encoder", key_of(key), {"encoder/encoder.ckpt"});
  log_ << "pretrain-encoder: validation context accuracy " << r.val_accuracy << "\n";
  return true;
}

bool Experiment::pretrain_recognizer() {
  persist_config();
  const json key{{"recognizer", config_.recognizer.to_json()}, {"train", config_.pretrain.to_json()}, {"data", dataset_sum()}};
  if (up_to_date("pretrain-recognizer", key_of(key))) return false;
  const auto ds = load_dataset();
  fs::create_directories(dir_ / "baseline");
  auto cfg = config_.pretrain;
  cfg.record_path = (dir_ / "baseline" / "run.jsonl").string();
  const auto r = train::pretrain_recognizer(cfg, config_.recognizer, ds);
  diff::save_checkpoint((dir_ / "baseline" / "recognizer.ckpt").string(), r.state,
                        {{"model_spec", r.spec.to_json()}, {"best_epoch", r.best_epoch}, {"best_val", r.best_val}});
  stamp("pretrain-recognizer", key_of(key), {"baseline/recognizer.ckpt"});
  log_ << "pretrain-recognizer: best epoch " << r.best_epoch << ", validation word accuracy " << r.best_val << "\n";
  return true;
}

bool Experiment::finetune() {
  persist_config();
  const json key{{"train", config_.finetune.to_json()},
                 {"data", dataset_sum()},
                 {"baseline", file_sum("baseline/recognizer.ckpt", "pretrain-recognizer")},
                 {"encoder", file_sum("encoder/encoder.ckpt", "pretrain-encoder")}};
  if (up_to_date("finetune", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto enc = load_encoder();
  const auto [base, base_spec] = load_recognizer("baseline");
  fs::create_directories(dir_ / "clipter");
  auto cfg = config_.finetune;
  cfg.record_path = (dir_ / "clipter" / "run.jsonl").string();
  cfg.cache_path = cache_file().string();
  const auto r = train::finetune_clipter(cfg, base, base_spec, enc, ds);
  for (const auto& w : r.warnings) log_ << "warning: " << w << "\n";
  diff::save_checkpoint((dir_ / "clipter" / "recognizer.ckpt").string(), r.state,
                        {{"model_spec", r.spec.to_json()}, {"best_epoch", r.best_epoch}, {"best_val", r.best_val}});
  stamp("finetune", key_of(key), {"clipter/recognizer.ckpt"});
  const auto& e = r.record.epochs();
  log_ << "finetune: best epoch " << r.best_epoch << ", validation corrupted-word accuracy " << r.best_val
       << ", tanh(alpha) " << e.back().tanh_alpha << "\n";
  return true;
}

bool Experiment::precompute_cache() {
  persist_config();
  const auto k = config_.finetune.clipter->pool;
  const json key{{"pool", k.str()}, {"data", dataset_sum()}, {"encoder", file_sum("encoder/encoder.ckpt", "pretrain-encoder")}};
  if (up_to_date("precompute-cache", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto enc = load_encoder();
  encoder::EmbeddingCache cache(cache_file().string(), enc.config().dim, k, enc.fingerprint());
  encoder::FeatureSource src(enc, k, &cache);
  for (const auto& s : ds.scenes) src.get(s);
  cache.save();
  stamp("precompute-cache", key_of(key), {fs::relative(cache_file(), dir_).string()});
  log_ << "precompute-cache: " << cache.size() << " scenes (" << cache.misses() << " encoded), k=" << k.str() << "\n";
  return true;
}

namespace {

void check_report(const eval::EvalReport& r) {
  eval::WordCounts all;
  for (const auto& s : r.splits) {
    if (!s.error) all += s.counts;
  }
  for (const auto& [k, v] : r.metrics()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvariantError("metric " + k + " outside [0, 1]");
  }
  if (all.total() > 0 &&
      r.weighted_average != static_cast<double>(all.correct()) / static_cast<double>(all.total())) {
    throw InvariantError("weighted average differs from total correct / total words");
  }
}

}  // namespace

bool Experiment::eval() {
  persist_config();
  const json key{{"data", dataset_sum()},
                 {"clipter", file_sum("clipter/recognizer.ckpt", "finetune")},
                 {"baseline", file_sum("baseline/recognizer.ckpt", "pretrain-recognizer")},
                 {"encoder", file_sum("encoder/encoder.ckpt", "pretrain-encoder")}};
  if (up_to_date("eval", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto enc = load_encoder();
  const auto [clip, clip_spec] = load_recognizer("clipter");
  const auto [base, base_spec] = load_recognizer("baseline");
  encoder::EmbeddingCache cache(cache_file().string(), enc.config().dim, clip_spec.clipter->pool, enc.fingerprint());
  encoder::FeatureSource src(enc, clip_spec.clipter->pool, &cache);
  const auto rb = eval::evaluate(base, base_spec, ds, nullptr, "baseline");
  auto rc = eval::evaluate(clip, clip_spec, ds, &src, "clipter");
  rc.compare_to(rb);
  check_report(rb);
  check_report(rc);
  write_json(dir_ / "eval" / "baseline.json", rb.to_json());
  write_json(dir_ / "eval" / "clipter.json", rc.to_json());
  std::ostringstream tsv;
  tsv.precision(10);
  tsv << "metric\tbaseline\tclipter\tdelta\n";
  const auto mb = rb.metrics();
  for (const auto& [k, v] : rc.metrics()) tsv << k << '\t' << mb.at(k) << '\t' << v << '\t' << v - mb.at(k) << '\n';
  write_text(dir_ / "eval" / "table.tsv", tsv.str());
  stamp("eval", key_of(key), {"eval/baseline.json", "eval/clipter.json", "eval/table.tsv"});
  log_ << "eval: corrupted-word accuracy baseline " << rb.corrupted_accuracy << ", clipter " << rc.corrupted_accuracy
       << "; weighted average " << rb.weighted_average << " -> " << rc.weighted_average << "\n";
  return true;
}

bool Experiment::pipeline_bench() {
  persist_config();
  const json key{{"data", dataset_sum()},
                 {"clipter", file_sum("clipter/recognizer.ckpt", "finetune")},
                 {"baseline", file_sum("baseline/recognizer.ckpt", "pretrain-recognizer")},
                 {"encoder", file_sum("encoder/encoder.ckpt", "pretrain-encoder")},
                 {"bench", config_.to_json().at("bench")}};
  if (up_to_date("pipeline-bench", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto enc = load_encoder();
  const auto [clip, clip_spec] = load_recognizer("clipter");
  const auto [base, base_spec] = load_recognizer("baseline");
  auto scenes = ds.select(data::Split::eval);
  if (static_cast<int>(scenes.size()) > config_.bench_scenes) scenes.resize(static_cast<std::size_t>(config_.bench_scenes));
  const eval::PipelineOptions opt{config_.bench_warmup, config_.bench_repeats};
  eval::PipelineTrace tb;
  eval::PipelineTrace tc;
  for (const auto* s : scenes) {
    const auto p = eval::detect_ground_truth(*s);
    tb.scenes.push_back(eval::run_pipeline({p}, base, base_spec, nullptr, opt).trace.scenes.front());
    tc.scenes.push_back(eval::run_pipeline({p}, clip, clip_spec, &enc, opt).trace.scenes.front());
  }
  for (std::size_t i = 0; i < tc.scenes.size(); ++i) {
    if (tc.scenes[i].encoder_invocations != 1 || tb.scenes[i].encoder_invocations != 0) {
      throw InvariantError("encode-once violated on scene " + std::to_string(tc.scenes[i].scene_id));
    }
  }
  const auto o = eval::overhead_report(tb, tc);
  json oj = o.to_json();
  oj["baseline_fps"] = tb.fps();
  oj["clipter_fps"] = tc.fps();
  const auto base_run = dir_ / "baseline" / "run.jsonl";
  const auto clip_run = dir_ / "clipter" / "run.jsonl";
  if (fs::exists(base_run) && fs::exists(clip_run)) {
    // Median over epochs after the first: the fine-tune cache is warm from epoch 2.
    auto warm_iter = [](const fs::path& p) {
      std::vector<double> t;
      std::ifstream in(p);
      for (std::string line; std::getline(in, line);) {
        const auto j = json::parse(line);
        if (j.value("event", "") == "epoch" && j.at("epoch").get<int>() >= 2) t.push_back(j.at("iter_seconds").get<double>());
      }
      if (t.empty()) return 0.0;
      std::sort(t.begin(), t.end());
      const std::size_t m = t.size() / 2;
      return t.size() % 2 == 1 ? t[m] : 0.5 * (t[m - 1] + t[m]);
    };
    const double tb_iter = warm_iter(base_run);
    const double tc_iter = warm_iter(clip_run);
    oj["train_iter_seconds_baseline"] = tb_iter;
    oj["train_iter_seconds_clipter_warm"] = tc_iter;
    oj["train_iter_overhead_ratio"] = tb_iter > 0.0 ? tc_iter / tb_iter - 1.0 : 0.0;
  }
  write_json(dir_ / "bench" / "baseline_trace.json", tb.to_json());
  write_json(dir_ / "bench" / "clipter_trace.json", tc.to_json());
  write_json(dir_ / "bench" / "overhead.json", oj);
  stamp("pipeline-bench", key_of(key), {"bench/overhead.json"});
  log_ << "pipeline-bench: " << scenes.size() << " scenes, median " << o.baseline_median * 1e3 << " ms -> "
       << o.clipter_median * 1e3 << " ms (" << o.ratio * 100.0 << "% overhead)\n";
  return true;
}

bool Experiment::sweep_lowdata() {
  persist_config();
  const json key{{"sweep", config_.to_json().at("sweep")},
                 {"pretrain", config_.pretrain.to_json()},
                 {"finetune", config_.finetune.to_json()},
                 {"recognizer", config_.recognizer.to_json()},
                 {"data", dataset_sum()},
                 {"encoder", file_sum("encoder/encoder.ckpt", "pretrain-encoder")}};
  if (up_to_date("sweep-lowdata", key_of(key))) return false;
  const auto ds = load_dataset();
  const auto enc = load_encoder();
  auto fine = config_.finetune;
  fine.cache_path = cache_file().string();
  const auto t = train::lowdata_sweep(config_.sweep_fractions, config_.sweep_seeds, config_.pretrain, fine,
                                      config_.recognizer, enc, ds, config_.sweep_match_iterations);
  write_text(dir_ / "sweep" / "table.tsv", t.to_tsv());
  stamp("sweep-lowdata", key_of(key), {"sweep/table.tsv"});
  log_ << "sweep-lowdata: " << t.runs << " training runs\n";
  for (const auto& [f, g] : t.mean_gap()) log_ << "  fraction " << f << ": mean corrupted-word gap " << g << "\n";
  return true;
}

bool Experiment::plot() {
  persist_config();
  const json key{{"table", file_sum("sweep/table.tsv", "sweep-lowdata")}};
  if (up_to_date("plot", key_of(key))) return false;
  std::ifstream in(dir_ / "sweep" / "table.tsv");
  std::stringstream ss;
  ss << in.rdbuf();
  write_text(dir_ / "plots" / "lowdata.svg", lowdata_svg(train::SweepTable::from_tsv(ss.str())));
  stamp("plot", key_of(key), {"plots/lowdata.svg"});
  log_ << "plot: " << (dir_ / "plots" / "lowdata.svg").string() << "\n";
  return true;
}

// ---- flops ---------------------------------------------------------------

json flops_report(const FlopsQuery& q) {
  const Index dg = q.d_global > 0 ? q.d_global : q.d;
  const auto mech = fusion::parse_mechanism(q.mechanism);
  const auto cfg = mech == fusion::Mechanism::gated ? fusion::FusionConfig::gated(q.d, dg)
                                                    : fusion::FusionConfig::mhca(fusion::parse_preset(q.preset), q.d, dg);
  const auto b = fusion::estimate_flops(cfg, static_cast<std::uint64_t>(q.n_local), static_cast<std::uint64_t>(q.n_global),
                                        static_cast<std::uint64_t>(q.d));
  return {{"mechanism", fusion::to_string(cfg.mechanism)},
          {"preset", fusion::to_string(cfg.preset)},
          {"n_local", q.n_local},
          {"n_global", q.n_global},
          {"d", q.d},
          {"d_global", dg},
          {"macs", b.total_macs()},
          {"flops", b.total_flops()},
          {"params", fusion::count_params(cfg)},
          {"terms",
           {{"global_projection", b.global_projection},
            {"stream_projection", b.stream_projection},
            {"query_projection", b.query_projection},
            {"kv_projection", b.kv_projection},
            {"scores", b.scores},
            {"weighted_sum", b.weighted_sum},
            {"output_projection", b.output_projection},
            {"feed_forward", b.feed_forward},
            {"final_projection", b.final_projection},
            {"gate_logits", b.gate_logits},
            {"gate_mix", b.gate_mix},
            {"tanh_blend", b.tanh_blend}}}};
}

// ---- plot ----------------------------------------------------------------

std::string lowdata_svg(const train::SweepTable& table) {
  std::map<double, std::pair<double, double>> sums;  // fraction -> (baseline err, clipter err)
  std::map<double, int> n;
  for (const auto& r : table.rows) {
    sums[r.fraction].first += 1.0 - r.baseline_corrupted;
    sums[r.fraction].second += 1.0 - r.clipter_corrupted;
    ++n[r.fraction];
  }
  if (sums.empty()) throw std::invalid_argument("sweep table has no rows");
  constexpr double kW = 480, kH = 360, kL = 60, kR = 20, kT = 30, kB = 50;
  constexpr double kFloor = 1e-3;  // error rates of 0 are drawn at the floor
  auto lx = [](double f) { return std::log10(f); };
  auto ly = [&](double e) { return std::log10(std::max(e, kFloor)); };
  double x0 = lx(sums.begin()->first);
  double x1 = lx(sums.rbegin()->first);
  if (x1 - x0 < 1e-9) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  double y0 = 0.0;
  double y1 = -3.0;
  for (const auto& [f, s] : sums) {
    for (double e : {s.first / n[f], s.second / n[f]}) {
      y0 = std::max(y0, ly(e));
      y1 = std::min(y1, ly(e));
    }
  }
  y1 = std::floor(y1);
  y0 = std::max(std::ceil(y0), y1 + 1.0);
  auto px = [&](double f) { return kL + (lx(f) - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double e) { return kT + (y0 - ly(e)) / (y0 - y1) * (kH - kT - kB); };

  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  for (const auto& [f, unused] : sums) {
    s << "<text x=\"" << px(f) << "\" y=\"" << kH - kB + 16 << "\" text-anchor=\"middle\">" << f * 100.0 << "%</text>\n";
  }
  for (double e = y1; e <= y0 + 1e-9; e += 1.0) {
    const double v = std::pow(10.0, e);
    s << "<line x1=\"" << kL - 4 << "\" y1=\"" << py(v) << "\" x2=\"" << kL << "\" y2=\"" << py(v) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << kL - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v * 100.0 << "%</text>\n";
  }
  s << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">training data fraction (log)</text>\n";
  s << "<text x=\"14\" y=\"" << (kT + kH - kB) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << (kT + kH - kB) / 2 << ")\">corrupted-word error rate (log)</text>\n";
  const std::pair<const char*, const char*> series[] = {{"baseline", "#1f77b4"}, {"clipter", "#d62728"}};
  for (int k = 0; k < 2; ++k) {
    s << "<polyline fill=\"none\" stroke=\"" << series[k].second << "\" stroke-width=\"2\" points=\"";
    for (const auto& [f, v] : sums) {
      const double e = (k == 0 ? v.first : v.second) / n[f];
      s << px(f) << ',' << py(e) << ' ';
    }
    s << "\"/>\n";
    for (const auto& [f, v] : sums) {
      const double e = (k == 0 ? v.first : v.second) / n[f];
      s << "<circle cx=\"" << px(f) << "\" cy=\"" << py(e) << "\" r=\"3\" fill=\"" << series[k].second << "\"/>\n";
    }
    s << "<text x=\"" << kW - kR - 70 << "\" y=\"" << kT + 14 * (k + 1) << "\" fill=\"" << series[k].second << "\">"
      << series[k].first << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace scenectx::cli
