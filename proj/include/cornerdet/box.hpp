#pragma once

#include <algorithm>

namespace cornerdet {

/// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const Box&) const = default;
};

/// Intersection over union; 0 for disjoint boxes or an empty union.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Ground-truth object: class id plus box.
struct Annotation {
  int cls = 0;
  Box box;
  bool operator==(const Annotation&) const = default;
};

}  // namespace cornerdet
