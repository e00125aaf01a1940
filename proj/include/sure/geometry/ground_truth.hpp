#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "sure/geometry/homography.hpp"

namespace sure::geo {

/// Regular lattice of coarse cells; cell (cx, cy) has center
/// ((cx + 0.5) * stride, (cy + 0.5) * stride) and flat index cy * cols + cx.
struct CoarseGrid {
  std::size_t cols = 0;
  std::size_t rows = 0;
  double stride = 8.0;

  std::size_t cells() const { return cols * rows; }
  Point2 center(std::size_t index) const {
    return {(static_cast<double>(index % cols) + 0.5) * stride,
            (static_cast<double>(index / cols) + 0.5) * stride};
  }
  static CoarseGrid for_image(std::size_t width, std::size_t height, std::size_t stride = 8) {
    return {width / stride, height / stride, static_cast<double>(stride)};
  }
};

struct GtMatch {
  std::size_t cell_a = 0;
  std::size_t cell_b = 0;
  Point2 a;       // cell center in A
  Point2 b;       // exact warp of the center into B
  Point2 offset;  // (b - center of cell_b) / stride, within [-0.5, 0.5]^2
};

struct GroundTruth {
  std::vector<GtMatch> matches;
  bool empty_overlap = false;

  std::vector<Correspondence> correspondences() const {
    std::vector<Correspondence> out;
    out.reserve(matches.size());
    for (const auto& m : matches) out.push_back({m.a, m.b, 1.0});
    return out;
  }
};

/// Warps every coarse cell center of A into B and assigns it to the nearest
/// cell center there. Cells that leave image B (or map to infinity) are
/// dropped.
inline GroundTruth make_ground_truth(const Homography& h, const CoarseGrid& grid_a,
                                     const CoarseGrid& grid_b, double width_b, double height_b) {
  GroundTruth gt;
  for (std::size_t i = 0; i < grid_a.cells(); ++i) {
    const Point2 c = grid_a.center(i);
    const auto w = h.apply(c);
    if (!w || !(w->x >= 0.0 && w->x < width_b && w->y >= 0.0 && w->y < height_b)) continue;
    auto cx = static_cast<std::size_t>(std::floor(w->x / grid_b.stride));
    auto cy = static_cast<std::size_t>(std::floor(w->y / grid_b.stride));
    if (cx >= grid_b.cols) cx = grid_b.cols - 1;
    if (cy >= grid_b.rows) cy = grid_b.rows - 1;
    const std::size_t j = cy * grid_b.cols + cx;
    const Point2 cb = grid_b.center(j);
    gt.matches.push_back({i, j, c, *w, (1.0 / grid_b.stride) * (*w - cb)});
  }
  gt.empty_overlap = gt.matches.empty();
  return gt;
}

inline GroundTruth make_ground_truth(const Homography& h, std::size_t width, std::size_t height,
                                     std::size_t stride = 8) {
  const auto grid = CoarseGrid::for_image(width, height, stride);
  return make_ground_truth(h, grid, grid, static_cast<double>(width), static_cast<double>(height));
}

}  // namespace sure::geo
