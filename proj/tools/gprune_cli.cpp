#include <CLI11.hpp>

#include <iostream>

#include "gprune/pipeline.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kStageFailure = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning of a toy transformer with behavior-consistent modules"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", profile = "desk", checkpoint;
  std::uint64_t seed = 0;
  std::vector<std::string> runs;
  std::vector<std::string> overrides;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Config file (dotted key = value lines)");
    sub->add_option("--seed", seed, "Overrides run.seed");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--profile", profile, "Default values: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--set", overrides, "Extra 'key=value' settings applied after the config file");
  };
  CLI::App* pretrain = app.add_subcommand("pretrain", "Train the toy model and write model.ckpt");
  common(pretrain);
  CLI::App* prune = app.add_subcommand("prune", "Run the pruning pipeline on a checkpoint");
  common(prune);
  prune->add_option("--checkpoint", checkpoint, "Overrides model.checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on the eval corpus");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  CLI::App* analyze = app.add_subcommand("analyze", "Recompute diagnostics for stored prune runs");
  common(analyze);
  analyze->add_option("runs", runs, "Prune output directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  gprune::RunConfig config;
  try {
    const gprune::RunConfig base = profile == "paper" ? gprune::RunConfig::paper() : gprune::RunConfig::desk();
    config = config_path.empty() ? base : gprune::load_config(config_path, base);
    std::string extra;
    for (const auto& kv : overrides) extra += kv + "\n";
    config = gprune::parse_config(extra, config);
    const CLI::App* active = app.get_subcommands().front();
    if (active->count("--seed")) config.seed = seed;
    if (!checkpoint.empty()) config.checkpoint = checkpoint;
    config.validate();
  } catch (const gprune::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*pretrain) {
      gprune::cmd_pretrain(config, out_dir);
      std::cout << "wrote " << out_dir << "/model.ckpt\n";
    } else if (*prune) {
      const gprune::PruneRun run = gprune::cmd_prune(config, out_dir);
      std::cout << "retention " << run.report.retention_actual << " (target " << config.target_retention
                << "), perplexity " << run.report.teacher_ppl << " -> " << run.report.pruned_ppl << '\n';
    } else if (*eval) {
      if (config.checkpoint.empty()) {
        std::cerr << "error: eval needs --checkpoint or model.checkpoint\n";
        return kUsage;
      }
      const gprune::EvalResult r = gprune::cmd_eval(config, config.checkpoint, out_dir);
      std::cout << "perplexity " << r.perplexity << " over " << r.tokens << " tokens\n";
    } else if (*analyze) {
      gprune::cmd_analyze(runs, out_dir);
      std::cout << "wrote " << out_dir << "/analyze_mss.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
