#pragma once

#include <algorithm>
#include <array>
#include <vector>

namespace mp3d {

/// Axis-aligned box (x1, y1, x2, y2) in pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  double score = 0;
};

/// Intersection over union; zero-area boxes give 0.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Log-space regression deltas (dx, dy, dw, dh) of `box` against `anchor`.
std::array<double, 4> encode_box(const Box& anchor, const Box& box);
/// Inverse of encode_box; dw, dh are clamped to avoid overflow.
Box decode_box(const Box& anchor, const std::array<double, 4>& deltas);

Box clip_box(const Box& b, double width, double height);
Box hflip_box(const Box& b, double width);
Box vflip_box(const Box& b, double height);

/// Greedy NMS on score-descending order (ties by index); returns kept indices.
std::vector<int> nms(const std::vector<Detection>& dets, double iou_thresh);

}  // namespace mp3d
