#pragma once

#include "mp3d/tensor.hpp"

namespace mp3d {

// 3D -> 2D feature conversion for the backbone stage outputs.

/// Group transform: views [N, C, D, H, W] as [N, C*D, H, W] (every D consecutive
/// channels form a group) and applies a C-group 1x1 convolution with D inputs and
/// one output per group. `weight` is [C, max_slices]; the central D entries are
/// the active group weights, so the parameter shape does not depend on D.
template <typename T>
BasicTensor<T> group_transform(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

/// Offset of the active window inside a group-transform weight row.
inline std::int64_t group_transform_offset(std::int64_t max_slices, std::int64_t depth) {
  return (max_slices - depth) / 2;
}

/// Center-crop transform: keeps depth index (D-1)/2. D must be odd.
template <typename T>
BasicTensor<T> center_crop_transform(const BasicTensor<T>& x);

}  // namespace mp3d
