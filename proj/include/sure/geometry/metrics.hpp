#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sure/error.hpp"
#include "sure/geometry/homography.hpp"

namespace sure::geo {

/// Correlation is undefined because one input has zero rank variance.
class UndefinedCorrelation : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Per-match end-point error ||b - H_true(a)|| in pixels (infinite when the
/// true warp leaves the projective plane).
inline std::vector<double> compute_epe(std::span<const Correspondence> pred,
                                       const Homography& h_true) {
  std::vector<double> out;
  out.reserve(pred.size());
  for (const auto& c : pred) {
    const auto w = h_true.apply(c.a);
    out.push_back(w ? distance(c.b, *w) : std::numeric_limits<double>::infinity());
  }
  return out;
}

struct AucResult {
  std::map<double, double> auc;  // threshold -> normalized area
  bool empty_input = false;      // warning flag: no errors were supplied
};

/// Normalized area under the cumulative error curve up to each threshold,
/// computed exactly from the step CDF: (1/n) * sum_k max(0, t - e_k) / t.
inline AucResult compute_auc(std::span<const double> errors, std::span<const double> thresholds) {
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw InvalidArgument("compute_auc: thresholds must be strictly ascending");
  AucResult res;
  res.empty_input = errors.empty();
  for (double t : thresholds) {
    if (!(t > 0.0)) throw InvalidArgument("compute_auc: thresholds must be positive");
    double area = 0.0;
    for (double e : errors) {
      if (!(e >= 0.0) && !std::isinf(e))
        throw InvalidArgument("compute_auc: errors must be non-negative");
      if (e < t) area += (t - e) / t;
    }
    res.auc[t] = errors.empty() ? 0.0 : area / static_cast<double>(errors.size());
  }
  return res;
}

/// Fractional (1-based) ranks; ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelation("correlation of a constant sequence");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman_rank_corr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw InvalidArgument("spearman: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  if (a.size() < 3) throw InvalidArgument("spearman: need at least 3 samples");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isnan(a[i]) || std::isnan(b[i])) throw InvalidArgument("spearman: NaN input");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

/// Symmetric epipolar distance d(b, F a)^2 + d(a, F^T b)^2. nullopt when an
/// epipolar line has a zero normal.
inline std::optional<double> symmetric_epipolar_error(const Correspondence& c,
                                                      const Eigen::Matrix3d& f) {
  const Eigen::Vector3d pa(c.a.x, c.a.y, 1.0), pb(c.b.x, c.b.y, 1.0);
  const Eigen::Vector3d la = f * pa;              // line in B
  const Eigen::Vector3d lb = f.transpose() * pb;  // line in A
  const double na = la.x() * la.x() + la.y() * la.y();
  const double nb = lb.x() * lb.x() + lb.y() * lb.y();
  if (na <= 0.0 || nb <= 0.0) return std::nullopt;
  const double r = pb.dot(la);
  return r * r * (1.0 / na + 1.0 / nb);
}

}  // namespace sure::geo
