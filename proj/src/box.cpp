#include "mp3d/box.hpp"

#include <cmath>
#include <numeric>

namespace mp3d {

namespace {
// Guards exp() against overflow only; decoded boxes are clipped to the image.
const double kMaxLogScale = std::log(1.0e6);
}

std::array<double, 4> encode_box(const Box& a, const Box& b) {
  const double aw = a.width(), ah = a.height();
  const double ax = a.x1 + 0.5 * aw, ay = a.y1 + 0.5 * ah;
  const double bw = b.width(), bh = b.height();
  const double bx = b.x1 + 0.5 * bw, by = b.y1 + 0.5 * bh;
  return {(bx - ax) / aw, (by - ay) / ah, std::log(bw / aw), std::log(bh / ah)};
}

Box decode_box(const Box& a, const std::array<double, 4>& d) {
  const double aw = a.width(), ah = a.height();
  const double ax = a.x1 + 0.5 * aw, ay = a.y1 + 0.5 * ah;
  const double cx = ax + d[0] * aw, cy = ay + d[1] * ah;
  const double w = aw * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

Box hflip_box(const Box& b, double width) { return {width - b.x2, b.y1, width - b.x1, b.y2}; }
Box vflip_box(const Box& b, double height) { return {b.x1, height - b.y2, b.x2, height - b.y1}; }

std::vector<int> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return dets[i].score > dets[j].score; });
  std::vector<int> keep;
  std::vector<char> removed(dets.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (removed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (!removed[j] && iou(dets[i].box, dets[j].box) > iou_thresh) removed[j] = 1;
    }
  }
  return keep;
}

}  // namespace mp3d
