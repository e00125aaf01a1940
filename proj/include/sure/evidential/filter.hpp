#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sure/coarse/matching.hpp"
#include "sure/error.hpp"
#include "sure/geometry/homography.hpp"

namespace sure::evi {

/// A refined correspondence with its axis-averaged uncertainties.
struct MatchWithUncertainty {
  std::size_t cell_a = 0;
  std::size_t cell_b = 0;
  geo::Point2 a;  // cell center in A
  geo::Point2 b;  // refined position in B
  double psi_x = 0.0;
  double psi_y = 0.0;
  double u_a = 0.0;
  double u_e = 0.0;
  double conf = 0.0;

  geo::Correspondence correspondence() const { return {a, b, conf}; }
};

/// Nearest-rank quantile: the ceil(q * n)-th smallest value, q in (0, 1].
inline double nearest_rank_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile of an empty sequence");
  if (!(q > 0.0 && q <= 1.0)) throw InvalidArgument("quantile level must be in (0, 1]");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

struct FilterThresholds {
  double tau_a = 0.0;
  double tau_e = 0.0;
};

inline FilterThresholds quantile_thresholds(std::span<const MatchWithUncertainty> matches,
                                            double q_a, double q_e) {
  std::vector<double> ua, ue;
  for (const auto& m : matches) {
    ua.push_back(m.u_a);
    ue.push_back(m.u_e);
  }
  return {nearest_rank_quantile(ua, q_a), nearest_rank_quantile(ue, q_e)};
}

/// Drops matches with u_a > tau_a or u_e > tau_e, keeping the input order.
inline std::vector<MatchWithUncertainty> filter_by_thresholds(
    std::span<const MatchWithUncertainty> matches, FilterThresholds t) {
  std::vector<MatchWithUncertainty> out;
  for (const auto& m : matches)
    if (!(m.u_a > t.tau_a) && !(m.u_e > t.tau_e)) out.push_back(m);
  return out;
}

/// Quantile filtering: thresholds are the q_a / q_e nearest-rank quantiles of
/// this batch's uncertainties.
inline std::vector<MatchWithUncertainty> filter_by_uncertainty(
    std::span<const MatchWithUncertainty> matches, double q_a, double q_e) {
  if (!(q_a > 0.0 && q_a <= 1.0) || !(q_e > 0.0 && q_e <= 1.0))
    throw InvalidArgument("filter_by_uncertainty: quantile levels must be in (0, 1]");
  if (matches.empty()) return {};
  return filter_by_thresholds(matches, quantile_thresholds(matches, q_a, q_e));
}

/// Moves each B-side cell center by stride * (psi_x, psi_y); A stays at its
/// cell center.
inline std::vector<MatchWithUncertainty> refine_matches(const coarse::CoarseMatchSet& matches,
                                                        std::span<const double> psi_x,
                                                        std::span<const double> psi_y) {
  if (psi_x.size() != matches.size() || psi_y.size() != matches.size())
    throw InvalidArgument("refine_matches: offset count does not match the match count");
  std::vector<MatchWithUncertainty> out;
  out.reserve(matches.size());
  const double stride = matches.grid_b.stride;
  for (std::size_t k = 0; k < matches.size(); ++k) {
    const auto& p = matches.pairs[k];
    MatchWithUncertainty m;
    m.cell_a = p.i;
    m.cell_b = p.j;
    m.a = matches.grid_a.center(p.i);
    m.psi_x = psi_x[k];
    m.psi_y = psi_y[k];
    m.b = matches.grid_b.center(p.j) + stride * geo::Point2{psi_x[k], psi_y[k]};
    m.conf = p.conf;
    out.push_back(m);
  }
  return out;
}

}  // namespace sure::evi
