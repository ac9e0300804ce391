#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mp3d/backbone.hpp"
#include "mp3d/box.hpp"
#include "mp3d/model_graph.hpp"
#include "mp3d/rng.hpp"

namespace mp3d {

struct AnchorConfig {
  std::vector<double> scales{16, 32, 64, 128, 256};  // one per level, P2..P6
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};  // height / width
  std::vector<int> strides{4, 8, 16, 32, 64};

  int per_location() const { return static_cast<int>(aspect_ratios.size()); }
  void validate() const;
};

/// Anchors of every level in (level, y, x, ratio) order plus per-level grid sizes.
struct AnchorSet {
  std::vector<Box> boxes;
  std::vector<std::array<std::int64_t, 2>> grid;  // (rows, cols) per level
};

/// Anchors centred on feature-cell centres. Grid size per level is
/// ceil(extent / stride). Width = scale * sqrt(1 / r), height = scale * sqrt(r).
AnchorSet generate_anchors(const AnchorConfig& cfg, std::int64_t height, std::int64_t width);

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct TargetAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<std::array<double, 4>> deltas;  // meaningful for positives only
  std::vector<int> matched_gt;                // -1 when unmatched

  std::int64_t num_positive() const;
};

/// IoU >= iou_pos positive, < iou_neg negative, otherwise ignored; each GT's
/// best anchors (ties included) are forced positive.
TargetAssignment assign_targets(const std::vector<Box>& anchors, const std::vector<Box>& gt, double iou_pos = 0.7,
                                double iou_neg = 0.3);

/// Sorted indices of a random subset of at most `batch_size` labelled anchors,
/// with at most pos_fraction * batch_size positives.
std::vector<std::int64_t> sample_anchors(const std::vector<AnchorLabel>& labels, int batch_size, double pos_fraction,
                                         Rng& rng);

struct DetectionLoss {
  Tensor total, cls, reg;
};

/// Sampled objectness + box regression loss over a batch.
///   logits [N, M, 1], deltas [N, M, 4]; one assignment per image.
/// Classification is the mean BCE over sampled anchors; regression the mean
/// smooth-L1 over the coordinates of sampled positives. total = cls + reg.
DetectionLoss detection_loss(const Tensor& logits, const Tensor& deltas, const std::vector<TargetAssignment>& targets,
                             Rng& rng, int batch_size = 256, double pos_fraction = 0.5);

struct DecodeOptions {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_dets = 100;
  int pre_nms_topk = 1000;
};

/// Decodes image `n` of [N, M, 1] logits and [N, M, 4] deltas into detections.
std::vector<Detection> decode_and_nms(const Tensor& logits, const Tensor& deltas, const std::vector<Box>& anchors,
                                      std::int64_t n, double image_height, double image_width,
                                      const DecodeOptions& opts = {});

struct DetectorConfig {
  BackboneConfig backbone;
  int fpn_channels = 256;
  AnchorConfig anchors;
  double iou_pos = 0.7;
  double iou_neg = 0.3;
  int sample_size = 256;
  double pos_fraction = 0.5;
  /// Initial foreground probability encoded in the classifier bias.
  double prior_prob = 0.01;
  DecodeOptions decode;

  void validate() const;
};

/// Appends FPN neck (P2..P6) on four 2D stage features; returns the level layers.
std::vector<int> add_fpn_neck(ModelGraph& graph, const std::array<int, 4>& stage_layers, int out_channels);

/// Shared dense head; appends per-level "cls_Pk" / "reg_Pk" outputs.
void add_head(ModelGraph& graph, const std::vector<int>& levels, int channels, int anchors_per_location,
              double prior_prob);

/// MP3D FPN detector: input "volume" [N, 1, D, H, W].
class Detector {
 public:
  explicit Detector(DetectorConfig cfg, std::uint64_t init_seed = 0, bool materialize = true);

  const DetectorConfig& config() const { return cfg_; }
  ModelGraph& graph() { return graph_; }
  const ModelGraph& graph() const { return graph_; }

  struct Output {
    Tensor logits;  // [N, M, 1]
    Tensor deltas;  // [N, M, 4]
  };
  Output forward(const Tensor& volume) const;

  AnchorSet anchors(std::int64_t height, std::int64_t width) const;

  /// Inference on a batch; returns detections per image.
  std::vector<std::vector<Detection>> detect(const Tensor& volume) const;

 private:
  DetectorConfig cfg_;
  ModelGraph graph_;
};

}  // namespace mp3d
