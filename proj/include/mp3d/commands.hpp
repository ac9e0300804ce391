#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mp3d/config.hpp"
#include "mp3d/eval.hpp"

namespace mp3d {

namespace fs = std::filesystem;

/// Generates the synthetic dataset into `out`; returns the manifest hash.
std::string cmd_synth_gen(const ExperimentConfig& cfg, const fs::path& out);

struct TrainOptions {
  fs::path data;
  fs::path out;
  std::optional<fs::path> init;
  /// Load only "backbone." parameters from --init.
  bool backbone_only = false;
  /// Percentages of the training split; one run per entry in out/fraction_<p>.
  std::vector<int> fractions;
  /// Truncates the schedule (0 = full).
  std::int64_t max_steps = 0;
};

/// Writes final.weights, best.weights, loss.csv, run.json and the config echo.
void cmd_train(const ExperimentConfig& cfg, const TrainOptions& opts);

struct EvalOptions {
  fs::path data;
  fs::path out;  // report JSON; predictions.csv goes next to it
  std::optional<fs::path> weights;
  std::optional<fs::path> predictions;
  std::string split = "val";
};

EvalReport cmd_eval(const ExperimentConfig& cfg, const EvalOptions& opts);

/// Profiler table for cfg.profile (slices overridable).
std::string cmd_profile(const ExperimentConfig& cfg, const std::vector<int>& slices, const fs::path& out);

/// D=3 pre-training on synthetic RGB images; writes pretrained.weights and loss.csv.
void cmd_pretrain_sim(const ExperimentConfig& cfg, const fs::path& out);

/// Merges the loss curves of two training runs (or fraction sweeps) into one CSV.
/// Runs whose data, seed, schedule or architecture differ are rejected.
void cmd_compare(const fs::path& run_a, const fs::path& run_b, const fs::path& out);

/// Detector config recorded by a training run (config.json next to the weights).
ExperimentConfig config_for_weights(const fs::path& weights);

}  // namespace mp3d
