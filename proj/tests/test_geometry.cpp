#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sure/geometry/correspondence_io.hpp"
#include "sure/geometry/estimation.hpp"
#include "sure/geometry/ground_truth.hpp"
#include "sure/geometry/metrics.hpp"
#include "oracles.hpp"
#include "sure/rng.hpp"

using namespace sure;
using namespace sure::geo;
using namespace sure::testing;

namespace {

void expect_close(const Homography& a, const Homography& b, double tol) {
  const auto ra = a.rows(), rb = b.rows();
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(ra[i], rb[i], tol) << "entry " << i;
}

}  // namespace

TEST(ApplyHomography, Examples) {
  EXPECT_EQ(*Homography().apply({7.5, -2}), (Point2{7.5, -2}));
  EXPECT_EQ(*Homography::translation(3, -2).apply({1, 1}), (Point2{4, -1}));
  EXPECT_EQ(*Homography::from_rows({2, 0, 0, 0, 2, 0, 0, 0, 1}).apply({1.5, 2.5}), (Point2{3, 5}));
}

TEST(ApplyHomography, PointAtInfinityIsFlagged) {
  const auto h = Homography::from_rows({1, 0, 0, 0, 1, 0, 1, 0, 1});
  const std::vector<Point2> pts{{-1, 0}, {1, 0}};
  const auto out = apply_homography(h, pts);
  EXPECT_FALSE(out[0].has_value());
  EXPECT_TRUE(out[1].has_value());
}

TEST(ApplyHomography, SingularRejected) {
  EXPECT_THROW(Homography::from_rows({1, 2, 0, 2, 4, 0, 0, 0, 1}), InvalidArgument);
}

TEST(ApplyHomography, RoundTrip) {
  Rng rng(21);
  for (int k = 0; k < 1000; ++k) {
    const auto h = random_homography(rng);
    const Point2 p{rng.uniform(0, 256), rng.uniform(0, 256)};
    const auto q = h.apply(p);
    ASSERT_TRUE(q);
    const auto back = h.inverse().apply(*q);
    ASSERT_TRUE(back);
    EXPECT_LT(distance(*back, p), 1e-6);
  }
}

TEST(GroundTruth, IdentityMatchesEveryCellToItself) {
  const auto gt = make_ground_truth(Homography(), 32, 32);
  ASSERT_EQ(gt.matches.size(), 16u);
  for (const auto& m : gt.matches) {
    EXPECT_EQ(m.cell_a, m.cell_b);
    EXPECT_EQ(m.offset, (Point2{0, 0}));
  }
  EXPECT_FALSE(gt.empty_overlap);
}

TEST(GroundTruth, OneStrideShift) {
  const auto gt = make_ground_truth(Homography::translation(8, 0), 32, 32);
  ASSERT_EQ(gt.matches.size(), 12u);
  for (const auto& m : gt.matches) {
    EXPECT_EQ(m.cell_b, m.cell_a + 1);
    EXPECT_EQ(m.offset, (Point2{0, 0}));
  }
}

TEST(GroundTruth, QuarterStrideShiftAgainstNearestCellOracle) {
  const auto gt = make_ground_truth(Homography::translation(2, 0), 32, 32);
  const auto grid = CoarseGrid::for_image(32, 32);
  ASSERT_EQ(gt.matches.size(), 16u);
  for (const auto& m : gt.matches) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < grid.cells(); ++j)
      if (distance(grid.center(j), m.b) < distance(grid.center(best), m.b)) best = j;
    EXPECT_EQ(m.cell_b, best);
    EXPECT_EQ(m.cell_b, m.cell_a);
    EXPECT_DOUBLE_EQ(m.offset.x, 0.25);
    EXPECT_DOUBLE_EQ(m.offset.y, 0.0);
  }
}

TEST(GroundTruth, EmptyOverlapIsFlagged) {
  const auto gt = make_ground_truth(Homography::translation(100, 0), 32, 32);
  EXPECT_TRUE(gt.matches.empty());
  EXPECT_TRUE(gt.empty_overlap);
}

TEST(GroundTruth, OffsetsStayInHalfCell) {
  Rng rng(22);
  for (int k = 0; k < 200; ++k) {
    const auto gt = make_ground_truth(random_homography(rng, 64), 64, 64);
    for (const auto& m : gt.matches) {
      EXPECT_LE(std::abs(m.offset.x), 0.5);
      EXPECT_LE(std::abs(m.offset.y), 0.5);
    }
  }
}

TEST(Dlt, UnitSquareIdentity) {
  const std::vector<Correspondence> c{
      {{0, 0}, {0, 0}}, {{1, 0}, {1, 0}}, {{1, 1}, {1, 1}}, {{0, 1}, {0, 1}}};
  expect_close(estimate_homography_dlt(c), Homography(), 1e-9);
}

TEST(Dlt, RecoversPlantedHomography) {
  Rng rng(23);
  for (int k = 0; k < 20; ++k) {
    const auto h = random_homography(rng);
    expect_close(estimate_homography_dlt(planted(h, rng, 8)), h, 1e-6);
  }
}

TEST(Dlt, MatchesEigenSolverOracleOnNoisyData) {
  Rng rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = planted(random_homography(rng), rng, 4 + rng.below(60), 2.0);
    const Eigen::Matrix3d got = estimate_homography_dlt(c).matrix();
    const Eigen::Matrix3d want = dlt_oracle(c);
    EXPECT_LT((got / got(2, 2) - want).norm(), 1e-9 * want.norm());
  }
}

TEST(Dlt, CollinearSampleIsRankDeficient) {
  const std::vector<Correspondence> c{
      {{0, 0}, {0, 0}}, {{1, 1}, {1, 1}}, {{2, 2}, {2, 2}}, {{0, 5}, {1, 5}}};
  EXPECT_THROW(estimate_homography_dlt(c), RankDeficiencyError);
}

TEST(Ransac, NoiselessInliers) {
  Rng rng(24);
  const auto h = random_homography(rng);
  const auto c = planted(h, rng, 100);
  const auto r = ransac_homography(c, RansacOptions{3.0, 2000, 5, 0.999});
  ASSERT_TRUE(r.success);
  EXPECT_EQ(r.num_inliers, 100u);
  EXPECT_TRUE(std::all_of(r.inliers.begin(), r.inliers.end(), [](bool b) { return b; }));
  expect_close(r.h, h, 1e-6);
}

TEST(Ransac, SeventyInliersThirtyOutliers) {
  Rng rng(25);
  std::size_t under_1px = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_homography(rng);
    auto c = planted(h, rng, 70, 0.5);
    const auto oracle = estimate_homography_dlt(c);
    for (int k = 0; k < 30; ++k)
      c.push_back({{rng.uniform(0, 256), rng.uniform(0, 256)},
                   {rng.uniform(0, 256), rng.uniform(0, 256)}});
    const auto r = ransac_homography(c, RansacOptions{3.0, 2000, 100u + trial, 0.999});
    ASSERT_TRUE(r.success);
    EXPECT_GE(r.num_inliers, 65u);
    const auto err = corner_errors(r.h, h, 256, 256);
    const auto oerr = corner_errors(oracle, h, 256, 256);
    const double worst = *std::max_element(err.begin(), err.end());
    if (trial == 0) {
      EXPECT_LT(worst, 1.0);
    }
    EXPECT_LT(worst, *std::max_element(oerr.begin(), oerr.end()) + 0.5);
    under_1px += worst < 1.0;
  }
  EXPECT_GE(under_1px, 95u);
}

TEST(Ransac, TooFewCorrespondencesFails) {
  const std::vector<Correspondence> c{{{0, 0}, {0, 0}}, {{1, 0}, {1, 0}}, {{0, 1}, {0, 1}}};
  const auto r = ransac_homography(c, RansacOptions{});
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.inliers.size(), 3u);
}

TEST(Ransac, BitDeterministicForFixedSeed) {
  Rng rng(26);
  const auto h = random_homography(rng);
  auto c = planted(h, rng, 60, 1.0);
  for (int k = 0; k < 40; ++k)
    c.push_back({{rng.uniform(0, 256), rng.uniform(0, 256)}, {rng.uniform(0, 256), rng.uniform(0, 256)}});
  const auto a = ransac_homography(c, RansacOptions{3.0, 500, 9, 0.999});
  const auto b = ransac_homography(c, RansacOptions{3.0, 500, 9, 0.999});
  EXPECT_EQ(a.h.rows(), b.h.rows());
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Epe, Examples) {
  const auto h = Homography::translation(1, 2);
  const std::vector<Correspondence> c{{{0, 0}, {1, 2}}, {{0, 0}, {4, 6}}, {{5, 5}, {5, 7}}};
  const auto e = compute_epe(c, h);
  EXPECT_EQ(e[0], 0.0);
  EXPECT_DOUBLE_EQ(e[1], 5.0);
  EXPECT_DOUBLE_EQ(e[2], std::hypot(-1.0, 0.0));
}

TEST(Auc, Examples) {
  const std::vector<double> th{3, 5, 10};
  const std::vector<double> zeros(5, 0.0), big(5, 11.0);
  for (double t : th) {
    EXPECT_EQ(compute_auc(zeros, th).auc.at(t), 1.0);
    EXPECT_EQ(compute_auc(big, th).auc.at(t), 0.0);
  }
  const std::vector<double> ones{1, 1, 1}, two{2};
  EXPECT_DOUBLE_EQ(compute_auc(ones, two).auc.at(2), 0.5);
  const auto empty = compute_auc(std::vector<double>{}, th);
  EXPECT_TRUE(empty.empty_input);
  EXPECT_EQ(empty.auc.at(10), 0.0);
}

TEST(Auc, InfiniteErrorCountsAsFailure) {
  const std::vector<double> e{0.0, std::numeric_limits<double>::infinity()}, th{3};
  EXPECT_DOUBLE_EQ(compute_auc(e, th).auc.at(3), 0.5);
}

TEST(Auc, MatchesPiecewiseIntegralOracle) {
  Rng rng(31);
  const std::vector<double> th{1.0, 3.0, 5.0, 10.0};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> e(1 + rng.below(60));
    for (auto& v : e) v = rng.uniform() < 0.2 ? std::round(rng.uniform(0, 12)) : rng.uniform(0, 15);
    const auto got = compute_auc(e, th).auc;
    for (double t : th) EXPECT_NEAR(got.at(t), auc_oracle(e, t), 1e-12);
  }
}

TEST(Auc, MonotoneInThresholdAndPermutationInvariant) {
  Rng rng(27);
  std::vector<double> th;
  for (int k = 1; k <= 30; ++k) th.push_back(0.5 * k);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> e(1 + rng.below(40));
    for (auto& x : e) x = rng.uniform(0, 20);
    const auto a = compute_auc(e, th).auc;
    for (std::size_t k = 1; k < th.size(); ++k) EXPECT_GE(a.at(th[k]), a.at(th[k - 1]));
    auto shuffled = e;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + rng.below(shuffled.size()), shuffled.end());
    const auto b = compute_auc(shuffled, th).auc;
    for (double t : th) EXPECT_NEAR(a.at(t), b.at(t), 1e-12);
  }
}

TEST(Spearman, Examples) {
  const std::vector<double> a{0.1, 0.5, 2, 7, 9}, rev{9, 7, 2, 0.5, 0.1};
  EXPECT_DOUBLE_EQ(spearman_rank_corr(a, a), 1.0);
  EXPECT_DOUBLE_EQ(spearman_rank_corr(a, rev), -1.0);
  const std::vector<double> x{1, 2, 2, 3}, y{1, 3, 2, 4};
  EXPECT_NEAR(spearman_rank_corr(x, y), spearman_oracle(x, y), 1e-9);
}

TEST(Spearman, ConstantInputIsUndefined) {
  const std::vector<double> a{1, 1, 1, 1}, b{1, 2, 3, 4};
  EXPECT_THROW(spearman_rank_corr(a, b), UndefinedCorrelation);
}

TEST(Spearman, MatchesOracleAndMonotoneInvariance) {
  Rng rng(28);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(30);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = std::round(rng.uniform(0, 8));
      b[i] = rng.uniform(-1, 1) + 0.1 * a[i];
    }
    double rho = 0.0;
    try {
      rho = spearman_rank_corr(a, b);
    } catch (const UndefinedCorrelation&) {
      continue;
    }
    EXPECT_NEAR(rho, spearman_oracle(a, b), 1e-9);
    std::vector<double> ta(n), tb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ta[i] = std::exp(a[i]);
      tb[i] = -1.0 / (b[i] + 10.0);
    }
    EXPECT_NEAR(spearman_rank_corr(ta, tb), rho, 1e-12);
  }
}

TEST(Epipolar, OnLineIsZero) {
  Eigen::Matrix3d f;
  f << 0, 0, 0, 0, 0, -1, 0, 1, 0;  // pure x-translation rig: same row
  EXPECT_NEAR(*symmetric_epipolar_error({{3, 4}, {10, 4}}, f), 0.0, 1e-15);
}

TEST(Epipolar, PerturbationGrowsError) {
  // Rig: camera B translated along x and rotated slightly about y.
  Eigen::Matrix3d k;
  k << 200, 0, 128, 0, 200, 128, 0, 0, 1;
  const double a = 0.05;
  Eigen::Matrix3d r;
  r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  const Eigen::Vector3d t(1.0, 0.2, 0.1);
  Eigen::Matrix3d tx;
  tx << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  const Eigen::Matrix3d f = k.inverse().transpose() * tx * r * k.inverse();
  const Eigen::Vector3d x(0.3, -0.2, 5.0);
  const Eigen::Vector3d pa = k * x, pb = k * (r * x + t);
  const Point2 a2{pa.x() / pa.z(), pa.y() / pa.z()}, b2{pb.x() / pb.z(), pb.y() / pb.z()};
  EXPECT_NEAR(*symmetric_epipolar_error({a2, b2}, f), 0.0, 1e-9);
  double prev = std::numeric_limits<double>::infinity();
  for (double d : {2.0, 1.0, 0.5, 0.1, 0.01}) {
    const double e = *symmetric_epipolar_error({a2, {b2.x, b2.y + d}}, f);
    EXPECT_GT(e, 0.0);
    EXPECT_LT(e, prev);
    prev = e;
  }
}

TEST(Epipolar, MatchesScalarOracle) {
  Rng rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    double m[9];
    for (auto& v : m) v = rng.uniform(-1, 1);
    Eigen::Matrix3d f;
    f << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
    const Correspondence c{{rng.uniform(0, 50), rng.uniform(0, 50)},
                           {rng.uniform(0, 50), rng.uniform(0, 50)}};
    const double la0 = m[0] * c.a.x + m[1] * c.a.y + m[2];
    const double la1 = m[3] * c.a.x + m[4] * c.a.y + m[5];
    const double la2 = m[6] * c.a.x + m[7] * c.a.y + m[8];
    const double lb0 = m[0] * c.b.x + m[3] * c.b.y + m[6];
    const double lb1 = m[1] * c.b.x + m[4] * c.b.y + m[7];
    const double r = c.b.x * la0 + c.b.y * la1 + la2;
    const double want = r * r / (la0 * la0 + la1 * la1) + r * r / (lb0 * lb0 + lb1 * lb1);
    EXPECT_NEAR(*symmetric_epipolar_error(c, f), want, 1e-9 * std::max(1.0, want));
  }
}

TEST(Epipolar, ZeroNormalIsFlagged) {
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
  f(2, 2) = 1;
  EXPECT_FALSE(symmetric_epipolar_error({{1, 1}, {2, 2}}, f).has_value());
}

TEST(CorrespondenceIo, RoundTripAndErrors) {
  std::vector<MatchRecord> recs{{{{1.5, 2.25}, {3, 4}, 0.75}, 0.01, 0.002}};
  std::stringstream ss;
  write_correspondences(ss, {"sure match"}, recs);
  const auto back = read_correspondences(ss);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].corr.a, recs[0].corr.a);
  EXPECT_EQ(back[0].corr.b, recs[0].corr.b);
  EXPECT_DOUBLE_EQ(back[0].u_a, 0.01);
  std::stringstream bad("1 2 3\n");
  EXPECT_THROW(read_correspondences(bad), InvalidArgument);
}
