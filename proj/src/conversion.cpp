#include "mp3d/conversion.hpp"

#include <string>

#include "mp3d/errors.hpp"
#include "mp3d/ops.hpp"

namespace mp3d {

template <typename T>
BasicTensor<T> group_transform(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() != 5) throw ShapeError("group_transform: expected [N, C, D, H, W], got " + shape_str(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  if (weight.rank() != 2 || weight.dim(0) != c)
    throw ShapeError("group_transform: weight must be [" + std::to_string(c) + ", max_slices], got " +
                     shape_str(weight.shape()));
  if (d > weight.dim(1))
    throw ShapeError("group_transform: depth " + std::to_string(d) + " exceeds max_slices " +
                     std::to_string(weight.dim(1)));
  auto window = narrow(weight, 1, group_transform_offset(weight.dim(1), d), d);
  auto kernel = reshape(window, {c, d, 1, 1, 1});
  auto flat = reshape(x, {n, c * d, h, w});
  ConvOptions opts;
  opts.groups = static_cast<int>(c);
  return conv3d(flat, kernel, bias, opts);
}

template <typename T>
BasicTensor<T> center_crop_transform(const BasicTensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("center_crop_transform: expected [N, C, D, H, W], got " + shape_str(x.shape()));
  const auto d = x.dim(2);
  if (d % 2 == 0) throw ShapeError("center_crop_transform: depth " + std::to_string(d) + " is even, no center slice");
  auto slice = narrow(x, 2, (d - 1) / 2, 1);
  return reshape(slice, {x.dim(0), x.dim(1), x.dim(3), x.dim(4)});
}

template BasicTensor<float> group_transform(const BasicTensor<float>&, const BasicTensor<float>&,
                                            const BasicTensor<float>&);
template BasicTensor<double> group_transform(const BasicTensor<double>&, const BasicTensor<double>&,
                                             const BasicTensor<double>&);
template BasicTensor<float> center_crop_transform(const BasicTensor<float>&);
template BasicTensor<double> center_crop_transform(const BasicTensor<double>&);

}  // namespace mp3d
