#include <iostream>

#include "CLI11.hpp"
#include "mp3d/commands.hpp"
#include "mp3d/errors.hpp"

namespace {

mp3d::ExperimentConfig load_or_default(const std::string& path) {
  return path.empty() ? mp3d::ExperimentConfig::defaults() : mp3d::ExperimentConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MP3D FPN lesion detection: data, training, evaluation and cost reports"};
  app.require_subcommand(1);

  std::string config, out, data, init, weights, predictions, split = "val", runs;
  std::vector<int> slices, fractions;
  bool backbone_only = false;
  std::int64_t max_steps = 0;

  auto* synth = app.add_subcommand("synth-gen", "Generate the synthetic CT dataset");
  synth->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "Train a detector on a generated dataset");
  train->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--init", init, "initial weights (any slice count)")->check(CLI::ExistingFile);
  train->add_flag("--backbone-only", backbone_only, "load only backbone parameters from --init");
  train->add_option("--fractions", fractions, "training-set percentages, one run each")->delimiter(',');
  train->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
  train->add_option("--out", out, "run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate weights or a prediction CSV");
  eval->add_option("--config", config, "experiment config (default: config.json next to --weights)")
      ->check(CLI::ExistingFile);
  eval->add_option("--weights", weights, "weight store")->check(CLI::ExistingFile);
  eval->add_option("--predictions", predictions, "prediction CSV used instead of running the model")
      ->check(CLI::ExistingFile);
  eval->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "val, train or all");
  eval->add_option("--out", out, "report JSON")->required();

  auto* profile = app.add_subcommand("profile", "FLOP and parameter table");
  profile->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
  profile->add_option("--slices", slices, "slice counts")->delimiter(',');
  profile->add_option("--out", out, "CSV path")->required();

  auto* pretrain = app.add_subcommand("pretrain-sim", "Simulated 2D pre-training of a 3-slice detector");
  pretrain->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  pretrain->add_option("--out", out, "output directory")->required();

  auto* compare = app.add_subcommand("compare", "Merge the loss curves of two runs");
  compare->add_option("--runs", runs, "A,B run directories")->required();
  compare->add_option("--out", out, "CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      std::cout << "manifest hash " << mp3d::cmd_synth_gen(mp3d::ExperimentConfig::load(config), out) << "\n";
    } else if (train->parsed()) {
      mp3d::TrainOptions o;
      o.data = data;
      o.out = out;
      if (!init.empty()) o.init = init;
      o.backbone_only = backbone_only;
      o.fractions = fractions;
      o.max_steps = max_steps;
      mp3d::cmd_train(mp3d::ExperimentConfig::load(config), o);
    } else if (eval->parsed()) {
      mp3d::EvalOptions o;
      o.data = data;
      o.out = out;
      o.split = split;
      if (!weights.empty()) o.weights = weights;
      if (!predictions.empty()) o.predictions = predictions;
      mp3d::ExperimentConfig cfg;
      if (!config.empty()) {
        cfg = mp3d::ExperimentConfig::load(config);
      } else if (!weights.empty()) {
        cfg = mp3d::config_for_weights(weights);
      } else {
        cfg = mp3d::ExperimentConfig::defaults();
      }
      const auto report = mp3d::cmd_eval(cfg, o);
      std::cout << report.csv_header() << report.csv_row();
    } else if (profile->parsed()) {
      std::cout << mp3d::cmd_profile(load_or_default(config), slices, out);
    } else if (pretrain->parsed()) {
      mp3d::cmd_pretrain_sim(mp3d::ExperimentConfig::load(config), out);
    } else if (compare->parsed()) {
      const auto comma = runs.find(',');
      if (comma == std::string::npos || runs.find(',', comma + 1) != std::string::npos)
        throw mp3d::ConfigError("--runs expects exactly two directories: A,B");
      mp3d::cmd_compare(runs.substr(0, comma), runs.substr(comma + 1), out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
