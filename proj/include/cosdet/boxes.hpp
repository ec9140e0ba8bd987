#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "cosdet/tensor.hpp"

namespace cosdet {

// axis-aligned box, (x1,y1) top-left inclusive, (x2,y2) bottom-right, pixels
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const { return x2 > x1 && y2 > y1; }

  Box clipped(double w, double h) const {
    return Box{std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w),
               std::clamp(y2, 0.0, h)};
  }

  Box hflip(double image_width) const { return Box{image_width - x2, y1, image_width - x1, y2}; }
};

// intersection over union; degenerate boxes give 0 by convention
inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) return 0.0;
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// (dx, dy, dw, dh): center offsets relative to anchor size, log-scale extents
struct BoxDelta {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

inline BoxDelta encode_delta(const Box& target, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  return BoxDelta{(target.cx() - anchor.cx()) / aw, (target.cy() - anchor.cy()) / ah,
                  std::log(target.width() / aw), std::log(target.height() / ah)};
}

inline Box decode_delta(const BoxDelta& d, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.cx() + d.dx * aw;
  const double cy = anchor.cy() + d.dy * ah;
  // clamp keeps exp from overflowing on wild regressor outputs
  const double w = aw * std::exp(std::min(d.dw, 4.0));
  const double h = ah * std::exp(std::min(d.dh, 4.0));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// greedy score-descending suppression; ties broken by lower index
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes,
                                    const std::vector<double>& scores, double iou_threshold) {
  check(boxes.size() == scores.size(), "nms: box/score extent mismatch");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t i : order) {
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t j : order) {
      if (j == i || suppressed[j]) continue;
      if (iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

}  // namespace cosdet
