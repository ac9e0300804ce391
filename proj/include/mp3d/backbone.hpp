#pragma once

#include <array>
#include <string>
#include <vector>

#include "mp3d/model_graph.hpp"

namespace mp3d {

enum class BackboneVariant { kMP3D63, kMR3D50 };
enum class PoolingPolicy { kAnisotropic, kIsotropic };
enum class Conversion { kGTM, kCTM };
enum class BlockKind { kPseudo3d, kFull3d };

const char* to_string(BackboneVariant v);
const char* to_string(PoolingPolicy p);
const char* to_string(Conversion c);
BackboneVariant parse_variant(const std::string& s);
PoolingPolicy parse_pooling(const std::string& s);
Conversion parse_conversion(const std::string& s);

/// One bottleneck residual block.
struct BlockSpec {
  int in_channels = 0;
  int bottleneck_channels = 0;
  int out_channels = 0;
  BlockKind kind = BlockKind::kPseudo3d;
  int spatial_stride = 1;
  int depth_stride = 1;  // 2 only under the isotropic pooling ablation
  /// Downsample in the 1x1x1 reduce conv instead of the 3x3 stage.
  bool stride_in_reduce = true;

  bool identity_shortcut() const { return in_channels == out_channels && spatial_stride == 1 && depth_stride == 1; }
};

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::kMP3D63;
  PoolingPolicy pooling = PoolingPolicy::kAnisotropic;
  Conversion conversion = Conversion::kGTM;
  std::array<int, 4> stage_blocks{3, 4, 6, 3};
  std::array<int, 4> stage_channels{256, 512, 1024, 2048};
  int stem_channels = 64;
  int input_slices = 9;
  int input_channels = 1;
  int norm_groups = 32;
  /// Width of the group-transform weight rows; bounds the usable slice count.
  int gtm_max_slices = 11;
  /// Start every residual branch at zero (last norm gamma = 0).
  bool zero_init_residual = false;
  /// Block downsampling in the 1x1x1 reduce conv (MSRA ResNet layout).
  bool stride_in_reduce = true;

  void validate() const;
};

/// Depth extent of the stage outputs C2..C5 for the configured slice count.
std::array<std::int64_t, 4> stage_depths(const BackboneConfig& cfg);

struct BackboneOutputs {
  std::array<int, 4> stage3d{};    // pre-conversion [N, C, D', H, W]
  std::array<int, 4> converted{};  // post-conversion [N, C, H, W]
  std::array<int, 4> strides{4, 8, 16, 32};
};

/// Appends a residual block reading layer `x`; returns the block output layer.
int add_residual_block(ModelGraph& graph, int x, const BlockSpec& spec, const std::string& prefix, int norm_groups,
                       bool zero_init_residual);

/// Appends the stem, four stages and per-stage conversions to `graph`.
/// Parameter names start with "backbone.".
BackboneOutputs add_backbone(ModelGraph& graph, int input, const BackboneConfig& cfg);

/// Standalone backbone graph with input "volume" [N, 1, D, H, W] and outputs
/// "C2".."C5" (converted) and "C2_3d".."C5_3d".
ModelGraph build_backbone(const BackboneConfig& cfg, bool materialize = true, std::uint64_t init_seed = 0);

}  // namespace mp3d
