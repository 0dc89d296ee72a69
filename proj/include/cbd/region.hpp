#pragma once

#include <algorithm>

namespace cbd {

// Integer rectangle inside an image: upper-left corner plus extent.
struct Region {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  long area() const { return static_cast<long>(height) * width; }

  bool inside(int image_h, int image_w) const {
    return row >= 0 && col >= 0 && height >= 1 && width >= 1 &&
           row + height <= image_h && col + width <= image_w;
  }

  bool contains(int r, int c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }

  bool operator==(const Region&) const = default;
};

inline long intersection_area(const Region& a, const Region& b) {
  const int r0 = std::max(a.row, b.row);
  const int c0 = std::max(a.col, b.col);
  const int r1 = std::min(a.row + a.height, b.row + b.height);
  const int c1 = std::min(a.col + a.width, b.col + b.width);
  if (r1 <= r0 || c1 <= c0) return 0;
  return static_cast<long>(r1 - r0) * (c1 - c0);
}

inline double iou(const Region& a, const Region& b) {
  const long inter = intersection_area(a, b);
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace cbd
