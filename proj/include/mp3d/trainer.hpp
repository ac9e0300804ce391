#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mp3d/data.hpp"
#include "mp3d/detector.hpp"
#include "mp3d/eval.hpp"
#include "mp3d/weights.hpp"

namespace mp3d {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 20;
  int batch_size = 2;
  /// Linear warmup from lr * warmup_factor over the first warmup_steps steps.
  int warmup_steps = 50;
  double warmup_factor = 0.1;
  /// Step decay points as fractions of the total step count.
  std::vector<double> decay_at{0.65, 0.9};
  double decay_factor = 0.1;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::uint64_t seed = 1;
  int loader_workers = 1;

  void validate() const;
};

/// Learning rate at `step` (0-based) of a `total`-step run.
double learning_rate(const TrainConfig& cfg, std::int64_t step, std::int64_t total);

/// SGD with momentum and L2 weight decay over a fixed parameter list.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay);
  void zero_grad();
  /// Scales gradients so their global norm is at most max_norm; returns the norm.
  double clip_grad_norm(double max_norm);
  void step(double lr);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  double momentum_, weight_decay_;
};

struct LossRow {
  std::int64_t step;
  double cls, reg, total;
};

/// Indexed training images. get() must be a pure function of (index, rng state).
struct SampleSource {
  std::size_t size = 0;
  std::function<SliceSample(std::size_t index, Rng& augment_rng)> get;
};

struct TrainResult {
  std::vector<LossRow> curve;
  WeightStore final_weights;
  WeightStore best_weights;
  int best_epoch = -1;
  double best_epoch_loss = 0;
  std::int64_t steps = 0;
};

/// Mini-batch SGD on the sampled detection loss. Epoch order, augmentation and
/// anchor sampling draw from named sub-streams of cfg.seed. A non-finite loss
/// raises DivergenceError. `step_limit` (> 0) truncates the schedule without
/// changing it.
TrainResult train_detector(Detector& det, const SampleSource& source, const TrainConfig& cfg,
                           std::int64_t step_limit = 0);

/// Stacks equally sized samples into a [N, 1, D, H, W] batch (zero-padding to
/// the largest extent).
Tensor stack_samples(const std::vector<SliceSample>& samples);

std::string loss_csv(const std::vector<LossRow>& rows);
std::vector<LossRow> read_loss_csv(const std::filesystem::path& path);

/// First step whose loss, smoothed over `window` steps, is <= threshold; -1 if none.
std::int64_t steps_to_reach(const std::vector<LossRow>& rows, double threshold, int window);
/// Mean total loss over the last `window` rows.
double final_loss(const std::vector<LossRow>& rows, int window);

/// Training images of a synthetic dataset: one window per (volume, image slice)
/// of the listed volumes, after HU clipping and z-resampling.
SampleSource make_volume_source(const std::vector<const VolumeRecord*>& volumes, int slices,
                                const AugmentConfig& augment, double target_mm = 2.5);

/// Image list for evaluation: keys and the matching center windows.
struct EvalSet {
  std::vector<std::string> keys;
  std::vector<SliceSample> samples;
  ImageBoxes gt;
};
EvalSet make_eval_set(const std::vector<const VolumeRecord*>& volumes, int slices, double target_mm = 2.5);

/// Runs the detector over an evaluation set (batched, no gradients).
ImageDetections predict(const Detector& det, const EvalSet& set, int batch_size = 8);

struct PretrainConfig {
  RgbSyntheticConfig images;
  TrainConfig train;
};

/// Trains a 3-slice detector on RGB images viewed as 3-slice volumes and
/// returns its weights (with backbone metadata).
WeightStore simulate_pretraining(const DetectorConfig& detector, const PretrainConfig& cfg,
                                 std::vector<LossRow>* curve = nullptr);

}  // namespace mp3d
