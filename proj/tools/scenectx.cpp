#include "scenectx/cli/experiment.hpp"
#include "scenectx/diffcore/optimizer.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace scenectx;
using nlohmann::json;

namespace {

struct Flags {
  std::string out;
  std::string config;
  std::string name;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> contexts;
  std::optional<int> train_scenes;
  std::optional<int> epochs;
  std::optional<std::string> arch;
  std::optional<std::string> mechanism;
  std::optional<std::string> preset;
  std::optional<std::string> point;
  std::optional<std::string> pool;
  std::optional<double> lr_scale;
  bool no_cache = false;
  std::vector<double> fractions;
  std::vector<std::uint64_t> seeds;
  std::optional<int> bench_scenes;
};

json flag_patch(const Flags& f, const std::string& command) {
  json p = json::object();
  if (!f.name.empty()) p["name"] = f.name;
  if (f.seed) {
    p["seed"] = *f.seed;
    p["encoder_train"]["seed"] = *f.seed;
    p["pretrain"]["seed"] = *f.seed;
    p["finetune"]["seed"] = *f.seed;
  }
  if (f.contexts) {
    p["data"]["contexts"] = *f.contexts;
    p["encoder"]["classes"] = *f.contexts;
  }
  if (f.train_scenes) p["data"]["counts"]["train"] = *f.train_scenes;
  if (f.epochs) {
    const char* section = command == "pretrain-encoder" ? "encoder_train"
                          : command == "finetune"        ? "finetune"
                                                         : "pretrain";
    p[section]["epochs"] = *f.epochs;
  }
  if (f.arch) p["recognizer"]["arch"] = *f.arch;
  if (f.point) p["finetune"]["clipter"]["integration_point"] = *f.point;
  if (f.pool) p["finetune"]["clipter"]["pool_k"] = *f.pool;
  if (f.lr_scale) p["finetune"]["lr_scale"] = *f.lr_scale;
  if (f.no_cache) p["finetune"]["use_cache"] = false;
  if (!f.fractions.empty()) p["sweep"]["fractions"] = f.fractions;
  if (!f.seeds.empty()) p["sweep"]["seeds"] = f.seeds;
  if (f.bench_scenes) p["bench"]["scenes"] = *f.bench_scenes;
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-context fusion for crop-based text recognition: experiment runner"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--out", f.out, "Experiment directory (default: $SCENECTX_OUT/<name> or runs/<name>)");
  app.add_option("--config", f.config, "JSON config file layered over the saved config");
  app.add_option("--name", f.name, "Experiment name");
  app.add_flag("--force", f.force, "Rerun even when outputs are up to date");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scene benchmark");
  gen->add_option("--seed", f.seed, "Master seed (also resets the training seeds)");
  gen->add_option("--contexts", f.contexts, "Number of scene contexts C");
  gen->add_option("--train-scenes", f.train_scenes, "Training scene count");

  auto* penc = app.add_subcommand("pretrain-encoder", "Train and freeze the scene encoder");
  auto* prec = app.add_subcommand("pretrain-recognizer", "Train the crop-only baseline recognizer");
  prec->add_option("--arch", f.arch, "ar | vit");
  auto* fine = app.add_subcommand("finetune", "Attach fusion and fine-tune from the baseline");
  for (auto* sub : {penc, prec, fine}) {
    sub->add_option("--epochs", f.epochs, "Training epochs");
    sub->add_option("--seed", f.seed, "Master seed");
  }
  auto* cache = app.add_subcommand("precompute-cache", "Encode and pool every scene into the embedding cache");
  for (auto* sub : {fine, cache}) {
    sub->add_option("--mechanism", f.mechanism, "gated | mhca");
    sub->add_option("--preset", f.preset, "tiny | mini | small (mhca)");
    sub->add_option("--point", f.point, "vision | contextual | decoder");
    sub->add_option("--pool", f.pool, "Pooling kernel: inf or an integer dividing the patch grid");
  }
  fine->add_option("--lr-scale", f.lr_scale, "Multiplier on the preset fine-tune rate");
  fine->add_flag("--no-cache", f.no_cache, "Encode scenes on every use instead of caching");

  app.add_subcommand("eval", "Evaluate baseline and fine-tuned models on the eval splits");
  auto* bench = app.add_subcommand("pipeline-bench", "Ground-truth-detector pipeline latency and encode-once check");
  bench->add_option("--scenes", f.bench_scenes, "Eval scenes to time");
  auto* sweep = app.add_subcommand("sweep-lowdata", "Baseline vs fine-tuned accuracy across training fractions");
  sweep->add_option("--fractions", f.fractions, "Training fractions in (0,1]")->delimiter(',');
  sweep->add_option("--seeds", f.seeds, "Seeds per fraction")->delimiter(',');
  app.add_subcommand("plot", "Render the low-data sweep table as a log-log SVG");

  cli::FlopsQuery fq;
  auto* flops = app.add_subcommand("flops", "Analytic fusion FLOPs and parameter count");
  flops->add_option("--mechanism", fq.mechanism, "gated | mhca");
  flops->add_option("--preset", fq.preset, "tiny | mini | small");
  flops->add_option("--n-local", fq.n_local, "Local tokens");
  flops->add_option("--n-global", fq.n_global, "Global tokens");
  flops->add_option("--d", fq.d, "Local width");
  flops->add_option("--d-global", fq.d_global, "Global width (default: --d)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (flops->parsed()) {
      std::cout << cli::flops_report(fq).dump(2) << "\n";
      return cli::kExitOk;
    }
    const auto* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    json patch = flag_patch(f, command);
    const std::string name = !f.name.empty() ? f.name : "default";
    const auto dir = cli::resolve_output_dir(f.out, name);
    auto config = cli::layer_config(dir, f.config, patch);
    if (f.mechanism || f.preset) {
      // A new mechanism or preset replaces the whole fusion block and its reference rate.
      auto& c = *config.finetune.clipter;
      const auto mech = f.mechanism ? fusion::parse_mechanism(*f.mechanism) : c.fusion.mechanism;
      const auto preset = f.preset ? fusion::parse_preset(*f.preset) : fusion::Preset::tiny;
      c.fusion = mech == fusion::Mechanism::gated
                     ? fusion::FusionConfig::gated(config.recognizer.d_local, config.encoder.dim)
                     : fusion::FusionConfig::mhca(preset, config.recognizer.d_local, config.encoder.dim);
      c.lr = fusion::reference_learning_rate(c.fusion);
      c.validate(config.recognizer);
    }
    cli::Experiment exp(dir, config, f.force, std::cout);
    if (command == "gen-data") exp.gen_data();
    else if (command == "pretrain-encoder") exp.pretrain_encoder();
    else if (command == "pretrain-recognizer") exp.pretrain_recognizer();
    else if (command == "finetune") exp.finetune();
    else if (command == "precompute-cache") exp.precompute_cache();
    else if (command == "eval") exp.eval();
    else if (command == "pipeline-bench") exp.pipeline_bench();
    else if (command == "sweep-lowdata") exp.sweep_lowdata();
    else if (command == "plot") exp.plot();
    return cli::kExitOk;
  } catch (const cli::InvariantError& e) {
    std::cerr << "invariant violated: " << e.what() << "\n";
    return cli::kExitInvariant;
  } catch (const diff::TrainingError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return cli::kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return cli::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitUsage;
  }
}
