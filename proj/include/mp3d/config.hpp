#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mp3d/data.hpp"
#include "mp3d/detector.hpp"
#include "mp3d/profiler.hpp"
#include "mp3d/trainer.hpp"

namespace mp3d {

struct DataSection {
  SyntheticConfig synthetic;
  /// z spacing after resampling, mm.
  double target_mm = 2.5;
  AugmentConfig augment;
  /// Fraction of the training split used by `train` (volumes in manifest order).
  double train_subset_fraction = 1.0;
};

struct EvalSection {
  double iou = 0.5;
  std::vector<double> fp_rates{0.5, 1, 2, 4};
  int batch_size = 8;
};

struct ProfileSection {
  ProfileConfig config;
  std::vector<int> slices{5, 7, 9, 11};
  std::vector<std::string> variants{"MP3D63", "MR3D50"};
  /// "paper": full-width ResNet-50 layout; "config": the detector section.
  std::string architecture = "paper";
};

/// Every field has a default; the defaults are the desk-scale experiment
/// (64x64 slices, narrow backbone, 20 epochs on 200 volumes at LR 0.01).
struct ExperimentConfig {
  DataSection data;
  DetectorConfig detector;
  TrainConfig train;
  EvalSection eval;
  ProfileSection profile;
  PretrainConfig pretrain;

  /// Text the config was parsed from; empty for pure defaults.
  std::string source;

  static ExperimentConfig defaults();
  /// Parses JSON over the defaults. Unknown keys and bad values raise
  /// ConfigError naming the key path and line.
  static ExperimentConfig parse(const std::string& text, const std::string& origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  void validate() const;
  /// Fully resolved config as JSON.
  std::string to_json() const;
  /// Verbatim source (or the resolved JSON when there is none).
  std::string echo() const;
  std::string hash() const;
};

/// Writes <stem>.json (verbatim) and <stem>.hash into `dir`.
void write_config_echo(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                       const std::string& stem = "config");
/// True when dir/<stem>.json hashes to dir/<stem>.hash.
bool verify_config_echo(const std::filesystem::path& dir, const std::string& stem = "config");

}  // namespace mp3d
