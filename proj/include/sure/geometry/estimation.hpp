#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "sure/error.hpp"
#include "sure/geometry/homography.hpp"
#include "sure/rng.hpp"

namespace sure::geo {

namespace detail {

// Similarity that moves the centroid to the origin and scales the mean
// distance from it to sqrt(2).
template <class Get>
Eigen::Matrix3d hartley_normalizer(std::span<const Correspondence> corrs, Get get) {
  double cx = 0.0, cy = 0.0;
  for (const auto& c : corrs) {
    cx += get(c).x;
    cy += get(c).y;
  }
  cx /= static_cast<double>(corrs.size());
  cy /= static_cast<double>(corrs.size());
  double mean_dist = 0.0;
  for (const auto& c : corrs) mean_dist += std::hypot(get(c).x - cx, get(c).y - cy);
  mean_dist /= static_cast<double>(corrs.size());
  if (!(mean_dist > 1e-12)) throw RankDeficiencyError("DLT: all points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

inline bool collinear(Point2 a, Point2 b, Point2 c) {
  const Point2 u = b - a, v = c - a;
  const double scale = std::max({norm(u), norm(v), 1e-300});
  return std::abs(u.x * v.y - u.y * v.x) <= 1e-9 * scale * scale;
}

}  // namespace detail

/// True when any three of the first four source points are collinear.
inline bool minimal_sample_degenerate(std::span<const Correspondence> c) {
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j)
      for (std::size_t k = j + 1; k < 4; ++k)
        if (detail::collinear(c[i].a, c[j].a, c[k].a)) return true;
  return false;
}

/// Normalized DLT: least-squares algebraic fit of H with b ~ H a.
inline Homography estimate_homography_dlt(std::span<const Correspondence> corrs) {
  if (corrs.size() < 4)
    throw InvalidArgument("DLT needs at least 4 correspondences, got " +
                          std::to_string(corrs.size()));
  if (corrs.size() == 4 && minimal_sample_degenerate(corrs))
    throw RankDeficiencyError("DLT: three source points are collinear");

  const auto ta = detail::hartley_normalizer(corrs, [](const Correspondence& c) { return c.a; });
  const auto tb = detail::hartley_normalizer(corrs, [](const Correspondence& c) { return c.b; });

  Eigen::MatrixXd a(2 * corrs.size(), 9);
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const Eigen::Vector3d p = ta * Eigen::Vector3d(corrs[i].a.x, corrs[i].a.y, 1.0);
    const Eigen::Vector3d q = tb * Eigen::Vector3d(corrs[i].b.x, corrs[i].b.y, 1.0);
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  // Pad the minimal case to a square system so the SVD exposes a full V.
  if (a.rows() < 9) {
    a.conservativeResize(9, Eigen::NoChange);
    a.row(8).setZero();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(7) <= 1e-9 * sv(0)) throw RankDeficiencyError("DLT: design matrix is rank deficient");
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  const Eigen::Matrix3d h = tb.inverse() * hn * ta;
  const double scale = h.norm();
  if (std::abs(h.determinant()) <= 1e-9 * scale * scale * scale)
    throw RankDeficiencyError("DLT: estimated homography is singular");
  return Homography(h);
}

/// Squared forward plus backward transfer distance.
inline double symmetric_transfer_error(const Homography& h, const Homography& h_inv,
                                       const Correspondence& c) {
  const auto fwd = h.apply(c.a);
  const auto bwd = h_inv.apply(c.b);
  if (!fwd || !bwd) return std::numeric_limits<double>::infinity();
  const Point2 d1 = *fwd - c.b, d2 = *bwd - c.a;
  return d1.x * d1.x + d1.y * d1.y + d2.x * d2.x + d2.y * d2.y;
}

struct RansacOptions {
  double inlier_threshold_px = 3.0;
  std::size_t max_iters = 2000;
  std::uint64_t seed = 0;
  double confidence = 0.999;
};

struct RansacResult {
  bool success = false;
  Homography h;
  std::vector<bool> inliers;
  std::size_t num_inliers = 0;
  std::size_t iterations = 0;
};

namespace detail {

inline std::size_t score(const Homography& h, std::span<const Correspondence> corrs, double thr2,
                         std::vector<bool>& mask, double& total_err) {
  const Homography h_inv = h.inverse();
  std::size_t count = 0;
  total_err = 0.0;
  mask.assign(corrs.size(), false);
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const double e = symmetric_transfer_error(h, h_inv, corrs[i]);
    if (e <= thr2) {
      mask[i] = true;
      ++count;
      total_err += e;
    }
  }
  return count;
}

}  // namespace detail

/// Hypothesize-and-verify homography fit with 4-point DLT samples. A
/// correspondence is an inlier when its forward and backward transfer errors
/// have RMS at most the threshold. The consensus set is refit by DLT.
inline RansacResult ransac_homography(std::span<const Correspondence> corrs,
                                      const RansacOptions& opt) {
  if (!(opt.inlier_threshold_px > 0.0)) throw InvalidArgument("RANSAC threshold must be positive");
  RansacResult best;
  best.inliers.assign(corrs.size(), false);
  if (corrs.size() < 4) return best;

  const double thr2 = 2.0 * opt.inlier_threshold_px * opt.inlier_threshold_px;
  Rng rng(opt.seed);
  std::size_t needed = opt.max_iters;
  double best_err = std::numeric_limits<double>::infinity();
  bool have_model = false;
  std::vector<bool> mask;
  std::array<Correspondence, 4> sample;
  const auto n = corrs.size();

  std::size_t it = 0;
  for (; it < std::min(needed, opt.max_iters); ++it) {
    std::array<std::size_t, 4> idx{};
    for (std::size_t k = 0; k < 4; ++k) {
      bool fresh;
      do {
        idx[k] = static_cast<std::size_t>(rng.below(n));
        fresh = std::find(idx.begin(), idx.begin() + k, idx[k]) == idx.begin() + k;
      } while (!fresh);
      sample[k] = corrs[idx[k]];
    }
    if (minimal_sample_degenerate(sample)) continue;
    Homography h;
    double err = 0.0;
    std::size_t count = 0;
    try {
      h = estimate_homography_dlt(sample);
      count = detail::score(h, corrs, thr2, mask, err);
    } catch (const NumericError&) {
      continue;
    } catch (const InvalidArgument&) {
      continue;
    }
    if (count > best.num_inliers || (count == best.num_inliers && count > 0 && err < best_err)) {
      best.num_inliers = count;
      best.h = h;
      best.inliers = mask;
      best_err = err;
      have_model = true;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double p_all = std::pow(w, 4.0);
      if (p_all >= 1.0 - 1e-12) {
        needed = it + 1;
      } else if (p_all > 0.0) {
        const double est = std::log(1.0 - opt.confidence) / std::log(1.0 - p_all);
        needed = static_cast<std::size_t>(std::ceil(std::max(est, 1.0)));
      }
    }
  }
  best.iterations = it;
  if (!have_model || best.num_inliers < 4) return best;

  // Refit on the consensus set, re-score, and keep the refit if it does not
  // lose support.
  for (int round = 0; round < 2; ++round) {
    std::vector<Correspondence> in;
    for (std::size_t i = 0; i < n; ++i)
      if (best.inliers[i]) in.push_back(corrs[i]);
    try {
      const Homography refit = estimate_homography_dlt(in);
      double err = 0.0;
      const auto count = detail::score(refit, corrs, thr2, mask, err);
      if (count < best.num_inliers) break;
      best.h = refit;
      best.inliers = mask;
      best.num_inliers = count;
    } catch (const NumericError&) {
      break;
    } catch (const InvalidArgument&) {
      break;
    }
  }
  best.success = best.num_inliers >= 4;
  return best;
}

inline RansacResult ransac_homography(std::span<const Correspondence> corrs,
                                      double inlier_threshold_px, std::size_t max_iters,
                                      std::uint64_t seed) {
  return ransac_homography(corrs, RansacOptions{inlier_threshold_px, max_iters, seed, 0.999});
}

}  // namespace sure::geo
