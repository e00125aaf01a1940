#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "sure/geometry/estimation.hpp"
#include "sure/geometry/metrics.hpp"
#include "sure/model/model.hpp"
#include "sure/train/synthetic.hpp"

namespace sure::model {

struct EvalOptions {
  MatchOptions match;
  std::vector<double> thresholds{3.0, 5.0, 10.0};
  double ransac_threshold_px = 3.0;
  std::size_t ransac_iters = 2000;
  std::size_t timing_runs = 1;  // timing is the median over this many matches
  std::uint64_t seed = 0;        // mixed into each pair's RANSAC seed when nonzero
};

struct PairEval {
  std::uint64_t seed = 0;
  std::size_t coarse_matches = 0;
  std::size_t refined_matches = 0;
  std::size_t kept_matches = 0;
  bool homography_ok = false;
  double corner_error = std::numeric_limits<double>::infinity();  // mean of 4 corners
  double mean_epe = std::numeric_limits<double>::quiet_NaN();      // refined, kept matches
  double mean_center_epe = std::numeric_limits<double>::quiet_NaN();  // cell centers, kept
  double match_ms = 0.0;
  std::vector<double> epe;  // per kept match
  std::vector<double> u_a;
  std::vector<double> u_e;
};

struct EvalReport {
  std::vector<PairEval> pairs;
  geo::AucResult auc;
  double mean_epe = std::numeric_limits<double>::quiet_NaN();
  double mean_center_epe = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> spearman_ua;  // empty when undefined
  std::optional<double> spearman_ue;
  double median_match_ms = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::optional<double> spearman_or_null(const std::vector<double>& a,
                                              const std::vector<double>& b) {
  if (a.size() < 3 || a.size() != b.size()) return std::nullopt;
  try {
    return geo::spearman_rank_corr(a, b);
  } catch (const geo::UndefinedCorrelation&) {
    return std::nullopt;
  }
}

/// Pairs whose RANSAC fit fails (fewer than 4 matches or no consensus) get an
/// infinite corner error, which counts as zero area in the AUC.
inline PairEval evaluate_matches(const std::vector<evi::MatchWithUncertainty>& kept,
                                 const geo::Homography& h_true, double width, double height,
                                 const geo::CoarseGrid& grid, const EvalOptions& opts,
                                 std::uint64_t ransac_seed) {
  PairEval pe;
  pe.kept_matches = kept.size();
  std::vector<geo::Correspondence> corrs;
  std::vector<double> center_epe;
  for (const auto& m : kept) {
    corrs.push_back(m.correspondence());
    const auto w = h_true.apply(m.a);
    const double e = w ? geo::distance(m.b, *w) : std::numeric_limits<double>::infinity();
    const double ec =
        w ? geo::distance(grid.center(m.cell_b), *w) : std::numeric_limits<double>::infinity();
    pe.epe.push_back(e);
    center_epe.push_back(ec);
    pe.u_a.push_back(m.u_a);
    pe.u_e.push_back(m.u_e);
  }
  pe.mean_epe = mean_of(pe.epe);
  pe.mean_center_epe = mean_of(center_epe);
  if (corrs.size() >= 4) {
    const auto r = geo::ransac_homography(
        corrs, geo::RansacOptions{opts.ransac_threshold_px, opts.ransac_iters, ransac_seed, 0.999});
    if (r.success) {
      pe.homography_ok = true;
      const auto ce = geo::corner_errors(r.h, h_true, width, height);
      pe.corner_error = (ce[0] + ce[1] + ce[2] + ce[3]) / 4.0;
    }
  }
  return pe;
}

template <class T>
PairEval evaluate_pair(Model<T>& m, const train::SyntheticPair& pair, const EvalOptions& opts) {
  const auto ta = pair.image_a.template to_tensor<T>();
  const auto tb = pair.image_b.template to_tensor<T>();
  MatchOutput out;
  std::vector<double> times;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opts.timing_runs); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    out = match(m, ta, tb, opts.match);
    times.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const auto grid = geo::CoarseGrid::for_image(pair.image_a.width, pair.image_a.height);
  auto pe = evaluate_matches(out.kept, pair.h_true, static_cast<double>(pair.image_a.width),
                             static_cast<double>(pair.image_a.height), grid, opts,
                             opts.seed == 0 ? pair.seed : derive_seed(pair.seed, opts.seed));
  pe.seed = pair.seed;
  pe.coarse_matches = out.coarse_count;
  pe.refined_matches = out.all.size();
  pe.match_ms = median_of(times);
  return pe;
}

inline EvalReport summarize(std::vector<PairEval> pairs, const std::vector<double>& thresholds) {
  EvalReport rep;
  std::vector<double> corner, epe, center, ua, ue, ms;
  for (const auto& p : pairs) {
    corner.push_back(p.corner_error);
    epe.insert(epe.end(), p.epe.begin(), p.epe.end());
    ua.insert(ua.end(), p.u_a.begin(), p.u_a.end());
    ue.insert(ue.end(), p.u_e.begin(), p.u_e.end());
    ms.push_back(p.match_ms);
    if (!std::isnan(p.mean_center_epe))
      center.push_back(p.mean_center_epe * static_cast<double>(p.kept_matches));
  }
  rep.auc = geo::compute_auc(corner, thresholds);
  rep.mean_epe = mean_of(epe);
  if (!epe.empty())
    rep.mean_center_epe =
        std::accumulate(center.begin(), center.end(), 0.0) / static_cast<double>(epe.size());
  rep.spearman_ua = spearman_or_null(ua, epe);
  rep.spearman_ue = spearman_or_null(ue, epe);
  rep.median_match_ms = median_of(ms);
  rep.pairs = std::move(pairs);
  return rep;
}

template <class T>
EvalReport evaluate(Model<T>& m, const std::vector<train::SyntheticPair>& data,
                    const EvalOptions& opts) {
  std::vector<PairEval> pairs;
  pairs.reserve(data.size());
  for (const auto& p : data) pairs.push_back(evaluate_pair(m, p, opts));
  return summarize(std::move(pairs), opts.thresholds);
}

}  // namespace sure::model
