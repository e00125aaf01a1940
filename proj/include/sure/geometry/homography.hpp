#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "sure/error.hpp"

namespace sure::geo {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(const Point2&, const Point2&) = default;
};

inline double norm(Point2 p) { return std::hypot(p.x, p.y); }
inline double distance(Point2 a, Point2 b) { return norm(a - b); }

/// A match between image A and image B.
struct Correspondence {
  Point2 a;
  Point2 b;
  double confidence = 1.0;
};

/// Projective depth below which a point is treated as mapped to infinity.
inline constexpr double kMinProjectiveDepth = 1e-9;

/// Non-singular 3x3 projective transform, stored with h(2,2) = 1 whenever the
/// input has a non-zero (2,2) entry.
class Homography {
 public:
  Homography() : h_(Eigen::Matrix3d::Identity()) {}

  explicit Homography(const Eigen::Matrix3d& h) : h_(h) {
    if (!h_.allFinite()) throw InvalidArgument("homography has non-finite entries");
    if (std::abs(h_(2, 2)) > 1e-12) h_ /= h_(2, 2);
    const double scale = h_.norm();
    if (scale == 0.0 || std::abs(h_.determinant()) <= 1e-9 * scale * scale * scale)
      throw InvalidArgument("homography is singular");
  }

  static Homography from_rows(const std::array<double, 9>& m) {
    Eigen::Matrix3d h;
    h << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
    return Homography(h);
  }
  static Homography translation(double tx, double ty) {
    return from_rows({1, 0, tx, 0, 1, ty, 0, 0, 1});
  }

  const Eigen::Matrix3d& matrix() const { return h_; }
  double operator()(int r, int c) const { return h_(r, c); }
  std::array<double, 9> rows() const {
    std::array<double, 9> out{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out[r * 3 + c] = h_(r, c);
    return out;
  }
  double determinant() const { return h_.determinant(); }

  Homography inverse() const { return Homography(Eigen::Matrix3d(h_.inverse())); }

  /// nullopt when the point maps to (near) infinity.
  std::optional<Point2> apply(Point2 p) const {
    const double w = h_(2, 0) * p.x + h_(2, 1) * p.y + h_(2, 2);
    if (std::abs(w) <= kMinProjectiveDepth) return std::nullopt;
    return Point2{(h_(0, 0) * p.x + h_(0, 1) * p.y + h_(0, 2)) / w,
                  (h_(1, 0) * p.x + h_(1, 1) * p.y + h_(1, 2)) / w};
  }

  friend Homography operator*(const Homography& a, const Homography& b) {
    return Homography(Eigen::Matrix3d(a.h_ * b.h_));
  }

 private:
  Eigen::Matrix3d h_;
};

inline std::vector<std::optional<Point2>> apply_homography(const Homography& h,
                                                           std::span<const Point2> points) {
  std::vector<std::optional<Point2>> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(h.apply(p));
  return out;
}

/// Distances between where `estimate` and `truth` send the four image corners.
inline std::array<double, 4> corner_errors(const Homography& estimate, const Homography& truth,
                                           double width, double height) {
  const std::array<Point2, 4> corners{Point2{0, 0}, Point2{width, 0}, Point2{width, height},
                                      Point2{0, height}};
  std::array<double, 4> err{};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto pe = estimate.apply(corners[i]);
    const auto pt = truth.apply(corners[i]);
    err[i] = (pe && pt) ? distance(*pe, *pt) : std::numeric_limits<double>::infinity();
  }
  return err;
}

}  // namespace sure::geo
