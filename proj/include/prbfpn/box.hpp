// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>

namespace prbfpn {

/// Axis-aligned box in image pixels, centre format.
struct Box {
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

struct GroundTruthBox {
  Box box;
  int class_id = 0;
};

struct Detection {
  Box box;
  double objectness = 0;
  int class_id = 0;
  double score = 0;
};

/// Intersection over union; 0 when either box has zero area.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace prbfpn
