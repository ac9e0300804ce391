#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mp3d/detector.hpp"
#include "mp3d/model_graph.hpp"

namespace mp3d {

/// FLOPs charged per multiply-accumulate (2 counts multiply and add separately).
struct FlopConvention {
  int mac_flops = 2;
  std::string tag() const { return "mac=" + std::to_string(mac_flops); }
};

struct CostRow {
  std::string name;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  Shape input;  // [N, C, D, H, W]
  std::string convention;
};

/// Parameter count per layer; shared parameters are charged to their first user.
CostReport count_params(const ModelGraph& model);

/// Closed-form cost at the given input. Convolutions cost mac_flops per MAC,
/// normalization 2 and activation/addition 1 per output element, pooling 1 per
/// window element; reshaping layers are free.
CostReport count_flops(const ModelGraph& model, const Shape& input, const FlopConvention& conv = {});

struct ProfileConfig {
  int resolution = 512;
  FlopConvention convention{1};
  /// Adds a cost-only second-stage box head: RoI features (fpn_channels x 7 x 7)
  /// through two fully connected layers for a fixed number of RoIs.
  bool include_box_head = true;
  int box_head_rois = 1000;
  int box_head_fc = 1024;
};

/// Shape-only detector graph for profiling, optionally with the box head costs.
ModelGraph build_profile_graph(const DetectorConfig& cfg, const ProfileConfig& prof);

struct ProfileVariant {
  std::string name;
  DetectorConfig detector;
};

/// CSV `variant,slices,params,flops,gflops`, GFLOPS with two decimals.
std::string report_table(const std::vector<ProfileVariant>& variants, const std::vector<int>& slices,
                         const ProfileConfig& prof);

/// Paper-scale MP3D-63 / MR3D-50 detector configuration.
DetectorConfig paper_detector_config(BackboneVariant variant, int slices);

}  // namespace mp3d
