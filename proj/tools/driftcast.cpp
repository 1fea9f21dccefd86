// Experiment driver: dataset builds, meta-training, the evaluation
// protocols, and report consolidation.

#include <CLI11.hpp>

#include "driftcast/experiment.hpp"

using namespace driftcast;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "run";
  int64_t seed = -1;   // overrides config when >= 0
  int seeds = -1;      // overrides config when >= 1
};

ExperimentConfig load_config(const CommonOpts& opts) {
  ExperimentConfig cfg =
      opts.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(opts.config_path);
  if (opts.seed >= 0) cfg.seed = static_cast<uint64_t>(opts.seed);
  if (opts.seeds >= 1) cfg.seeds = opts.seeds;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_seeds = true) {
  cmd->add_option("--config", opts.config_path, "config file (key=value lines)");
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--seed", opts.seed, "base seed (overrides config)");
  if (with_seeds) cmd->add_option("--seeds", opts.seeds, "number of seeds (overrides config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"driftcast: drift-aware mobility forecasting benchmark"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string algo = "reptile";
  std::string data_dir = "data";
  std::string scenario = "sudden-turn";
  std::vector<std::string> methods{"cv", "kf", "offline", "fomaml", "reptile"};
  std::vector<std::string> run_dirs;

  auto* build = app.add_subcommand("build-data", "generate the dataset bundle");
  add_common(build, opts, false);

  auto* mtrain = app.add_subcommand("meta-train", "meta-train an initialization");
  add_common(mtrain, opts, false);
  mtrain->add_option("--data", data_dir, "dataset directory from build-data");
  mtrain->add_option("--algo", algo, "reptile | fomaml")
      ->check(CLI::IsMember({"reptile", "fomaml"}));

  auto* zeroshot = app.add_subcommand("eval-zeroshot", "zero-shot comparison on unseen tasks");
  add_common(zeroshot, opts);
  zeroshot->add_option("--methods", methods, "subset of cv,kf,offline,fomaml,reptile")
      ->delimiter(',');

  auto* fewshot = app.add_subcommand("eval-fewshot", "few-shot adaptation curves");
  add_common(fewshot, opts);

  auto* drift = app.add_subcommand("eval-drift", "drift recovery stress test");
  add_common(drift, opts);
  drift->add_option("--scenario", scenario, "sudden-turn | speed-shift")
      ->check(CLI::IsMember({"sudden-turn", "speed-shift"}));

  auto* ho = app.add_subcommand("eval-ho", "downstream handover prediction");
  add_common(ho, opts);

  auto* report = app.add_subcommand("report", "consolidate run reports");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--out", opts.out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed()) {
      cmd_build_data(load_config(opts), opts.out_dir);
    } else if (mtrain->parsed()) {
      cmd_meta_train(load_config(opts), data_dir,
                     algo == "reptile" ? MetaAlgo::Reptile : MetaAlgo::Fomaml, opts.out_dir);
    } else if (zeroshot->parsed()) {
      write_run_output(opts.out_dir, cmd_eval_zeroshot(load_config(opts), methods));
    } else if (fewshot->parsed()) {
      write_run_output(opts.out_dir, cmd_eval_fewshot(load_config(opts)));
    } else if (drift->parsed()) {
      write_run_output(opts.out_dir,
                       cmd_eval_drift(load_config(opts), scenario == "sudden-turn"
                                                             ? DriftScenario::SuddenTurn
                                                             : DriftScenario::SpeedShift));
    } else if (ho->parsed()) {
      write_run_output(opts.out_dir, cmd_eval_ho(load_config(opts)));
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      cmd_report(dirs, opts.out_dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
