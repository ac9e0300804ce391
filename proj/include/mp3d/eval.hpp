#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mp3d/box.hpp"

namespace mp3d {

using ImageDetections = std::map<std::string, std::vector<Detection>>;
using ImageBoxes = std::map<std::string, std::vector<Box>>;

struct MatchedPrediction {
  std::string image;
  int index = 0;  // position within the image's prediction list
  double score = 0;
  bool tp = false;
  int gt = -1;  // matched GT index within the image
  double iou = 0;
};

/// Greedy matching in global score-descending order (ties: image name, then
/// index). A prediction is a TP when some unmatched GT of its image has
/// IoU >= iou_thresh; the highest-IoU such GT is consumed.
std::vector<MatchedPrediction> match_detections(const ImageDetections& preds, const ImageBoxes& gts,
                                                double iou_thresh = 0.5);

inline const std::vector<double> kFpRates{0.5, 1.0, 2.0, 4.0};

/// Step-function FROC: for each rate r, the sensitivity of the most inclusive
/// score threshold whose false positives per image do not exceed r. Equal
/// scores form one threshold.
std::vector<double> froc_sensitivity(const std::vector<bool>& tp, const std::vector<double>& scores,
                                     std::int64_t num_images, std::int64_t num_gts,
                                     const std::vector<double>& fp_rates = kFpRates);

/// All-points interpolated average precision with tied scores grouped.
double average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, std::int64_t num_gts);

struct EvalReport {
  std::vector<double> fp_rates = kFpRates;
  std::vector<double> sensitivity;
  double ap50 = 0;
  std::int64_t num_images = 0, num_gts = 0, num_predictions = 0, num_tp = 0;
  std::vector<MatchedPrediction> matches;

  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

/// Evaluates predictions over the listed images (images without GT count
/// towards the FP rate). Predictions for unlisted images are an error.
EvalReport evaluate(const ImageDetections& preds, const ImageBoxes& gts, const std::vector<std::string>& images,
                    double iou_thresh = 0.5, const std::vector<double>& fp_rates = kFpRates);

/// CSV `image_id,x1,y1,x2,y2,score` with four decimals.
void write_predictions_csv(const std::filesystem::path& path, const ImageDetections& preds);
ImageDetections read_predictions_csv(const std::filesystem::path& path);

}  // namespace mp3d
