#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mp3d/tensor.hpp"

namespace mp3d {

using Triple = std::array<int, 3>;

/// Output extent of a strided, zero-padded window sweep.
inline std::int64_t window_output_extent(std::int64_t in, int window, int stride, int pad) {
  return (in + 2 * pad - window) / stride + 1;
}

struct ConvOptions {
  Triple stride{1, 1, 1};
  Triple pad{0, 0, 0};
  int groups = 1;
};

/// Grouped 3D convolution with zero padding.
///   input  [N, Cin, D, H, W]  (rank-4 [N, Cin, H, W] is treated as D = 1)
///   kernel [Cout, Cin/groups, kd, kh, kw]
///   bias   [Cout] or undefined
/// Output has the same rank as the input.
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      const ConvOptions& options);

enum class PoolMode { kMax, kAvg };

/// Window pooling over (D, H, W). Max padding never wins; average padding counts
/// as zeros. Max-gradient ties go to the first element in row-major scan order.
template <typename T>
BasicTensor<T> pool3d(const BasicTensor<T>& input, PoolMode mode, Triple window, Triple stride, Triple pad = {0, 0, 0});

/// Group normalization over [N, C, ...]; gamma/beta are [C] (undefined = identity).
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, int num_groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& x, const BasicTensor<T>& y);
/// Elementwise product.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& x, const BasicTensor<T>& y);
template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T s);

/// [N, C, H, W] -> [N, C, 2H, 2W], nearest neighbour.
template <typename T>
BasicTensor<T> upsample2x_nearest(const BasicTensor<T>& x);

/// Copy with a new shape of equal element count.
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// Slice [start, start + length) along `dim`.
template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int dim, std::int64_t start, std::int64_t length);

/// Per-level head maps [N, k*A, H, W] (channel a*k + j) flattened and joined into
/// [N, sum(H*W*A), k], anchors ordered (level, y, x, a).
template <typename T>
BasicTensor<T> concat_anchor_outputs(const std::vector<BasicTensor<T>>& levels, int values_per_anchor);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// sum(x * w) with w a constant of the same element count.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& x, const std::vector<T>& w);

/// Weighted mean of elementwise binary cross-entropy on logits. target and
/// weights are constants; an all-zero weight vector yields 0.
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                               const BasicTensor<T>& weights = {});

/// Weighted mean of smooth-L1: 0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta.
template <typename T>
BasicTensor<T> smooth_l1(const BasicTensor<T>& pred, const BasicTensor<T>& target, double beta = 1.0,
                         const BasicTensor<T>& weights = {});

}  // namespace mp3d
