#include <gtest/gtest.h>

#include <cmath>

#include "sure/model/model.hpp"
#include "sure/train/adamw.hpp"
#include "sure/train/losses.hpp"
#include "sure/train/synthetic.hpp"
#include "sure/train/trainer.hpp"
#include "test_util.hpp"

using namespace sure;
using namespace sure::train;
using namespace sure::testing;

namespace {

constexpr double kFocalHalf = 0.25 * 0.25 * 0.69314718055994531;

coarse::DualSoftmax<double> probs(const std::vector<double>& ab, const std::vector<double>& ba,
                                  std::size_t rows, std::size_t cols) {
  return {TD::constant({rows, cols}, ab), TD::constant({rows, cols}, ba), std::nullopt,
          std::nullopt};
}

model::ModelConfig tiny_model_config() {
  model::ModelConfig cfg;
  cfg.backbone = {4, 8, 8, 8, true};
  cfg.c_fine = 8;
  cfg.head_hidden = 8;
  return cfg;
}

TrainConfig tiny_train_config() {
  TrainConfig tc;
  tc.image_size = 32;
  tc.neighbor_pairs = 4;
  tc.seed = 5;
  return tc;
}

std::vector<std::vector<double>> snapshot(model::Model<double>& m) {
  std::vector<std::vector<double>> out;
  m.visit([&](const std::string&, TD& t) { out.push_back(t.values()); });
  m.visit_norms([&](const std::string&, backbone::ChannelNorm<double>& n) {
    out.push_back(n.running_mean);
    out.push_back(n.running_var);
  });
  return out;
}

}  // namespace

TEST(Focal, Examples) {
  EXPECT_EQ(focal_loss(1.0, 0.25, 2.0), 0.0);
  EXPECT_NEAR(focal_loss(0.5, 0.25, 2.0), 0.043322, 1e-6);
  EXPECT_DOUBLE_EQ(focal_loss(0.5, 0.25, 2.0), kFocalHalf);
  for (double p : {0.1, 0.4, 0.9}) EXPECT_DOUBLE_EQ(focal_loss(p, 0.3, 0.0), -0.3 * std::log(p));
}

TEST(Focal, ZeroProbabilityIsFloored) {
  const double v = focal_loss(0.0, 0.25, 2.0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -0.25 * std::log(kProbFloor), 1e-9);
}

TEST(Focal, LogFormAgreesWithProbabilityForm) {
  Rng rng(1);
  std::vector<double> p(50), lp(50);
  for (std::size_t k = 0; k < 50; ++k) {
    p[k] = rng.uniform(0.001, 1.0);
    lp[k] = std::log(p[k]);
  }
  Tape<double> tape;
  const auto a = detail::focal_elements(tape, TD::constant({50}, p), 0.25, 2.0);
  const auto b = detail::focal_from_log(tape, TD::constant({50}, lp), 0.25, 2.0);
  for (std::size_t k = 0; k < 50; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  EXPECT_LT(worst_grad_error(rng, 100, {{6}},
                             [](auto& t, const auto& in) {
                               return detail::focal_from_log(
                                   t, diff::add_scalar(t, diff::scale(t, in[0], 0.5), -0.6), 0.25,
                                   2.0);
                             }),
            1e-4);
}

TEST(CoarseLoss, PerfectPredictionIsZero) {
  const std::vector<double> eye{1, 0, 0, 1};
  Tape<double> tape;
  const auto l = coarse_loss(tape, probs(eye, eye, 2, 2), {{0, 0}, {1, 1}}, 0.25, 2.0);
  EXPECT_FALSE(l.empty);
  EXPECT_EQ(l.value.item(), 0.0);
}

TEST(CoarseLoss, SingleHalfProbabilityPair) {
  const std::vector<double> half{0.5, 0.5, 0.5, 0.5};
  Tape<double> tape;
  const auto l = coarse_loss(tape, probs(half, half, 2, 2), {{0, 1}}, 0.25, 2.0);
  EXPECT_NEAR(l.value.item(), 2 * kFocalHalf, 1e-15);
}

TEST(CoarseLoss, EmptyGroundTruthIsFlagged) {
  const std::vector<double> half{0.5, 0.5, 0.5, 0.5};
  Tape<double> tape;
  const auto l = coarse_loss(tape, probs(half, half, 2, 2), {}, 0.25, 2.0);
  EXPECT_TRUE(l.empty);
  EXPECT_EQ(l.value.item(), 0.0);
}

TEST(CoarseLoss, NonNegativeAndDecreasingInGroundTruthMass) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> ab(9), ba(9);
    for (auto& v : ab) v = rng.uniform(0.01, 0.99);
    for (auto& v : ba) v = rng.uniform(0.01, 0.99);
    const std::vector<std::pair<std::size_t, std::size_t>> gt{{0, rng.below(3)}, {2, rng.below(3)}};
    auto eval = [&](const std::vector<double>& x, const std::vector<double>& y) {
      Tape<double> tape;
      return coarse_loss(tape, probs(x, y, 3, 3), gt, 0.25, 2.0).value.item();
    };
    const double base = eval(ab, ba);
    EXPECT_GE(base, 0.0);
    const auto [i, j] = gt[rng.below(2)];
    auto up = ab;
    up[i * 3 + j] += rng.uniform(0.0, 1.0 - up[i * 3 + j]);
    EXPECT_LE(eval(up, ba), base);
    up = ba;
    up[i * 3 + j] += rng.uniform(0.0, 1.0 - up[i * 3 + j]);
    EXPECT_LE(eval(ab, up), base);
  }
}

TEST(TotalLoss, ExamplesAndLinearity) {
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 2, 1.0, 0.25), 2.0);
  EXPECT_EQ(total_loss(0, 0, 0, 1.0, 0.25), 0.0);
  EXPECT_EQ(total_loss(0.7, 5, 9, 1.0, 0.0), 0.7);
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    const double c = rng.uniform(0, 3), x = rng.uniform(0, 3), y = rng.uniform(0, 3);
    const double lc = rng.uniform(0, 2), lf = rng.uniform(0, 2), d = rng.uniform(-1, 1);
    EXPECT_NEAR(total_loss(c + d, x, y, lc, lf) - total_loss(c, x, y, lc, lf), lc * d, 1e-12);
    EXPECT_NEAR(total_loss(c, x + d, y, lc, lf) - total_loss(c, x, y, lc, lf), lf * d, 1e-12);
    EXPECT_NEAR(total_loss(c, x, y + d, lc, lf) - total_loss(c, x, y, lc, lf), lf * d, 1e-12);
    Tape<double> tape;
    const auto t = total_loss(tape, TD::scalar(c), std::optional<TD>(TD::scalar(x)),
                              std::optional<TD>(TD::scalar(y)), lc, lf);
    EXPECT_NEAR(t.item(), total_loss(c, x, y, lc, lf), 1e-12);
  }
}

TEST(AdamW, ScalarTrajectoryMatchesReference) {
  const AdamWConfig cfg{0.01, 0.1, 0.9, 0.999, 1e-8};
  const double g = 0.37;
  std::vector<TD> params{TD::parameter({1}, {1.5})};
  AdamWState st;
  double w = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    params[0].clear_grad();
    diff::grad_sink(params[0])[0] = g;
    ASSERT_TRUE(optimizer_step(params, st, cfg));
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w = w * (1 - 0.01 * 0.1) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(params[0][0], w, 1e-10);
  }
}

TEST(AdamW, DecayOnlyShrinksGeometrically) {
  std::vector<TD> params{TD::parameter({2}, {2.0, -1.0})};
  AdamWState st;
  const AdamWConfig cfg{0.05, 0.2};
  for (int t = 1; t <= 10; ++t) {
    params[0].clear_grad();
    diff::grad_sink(params[0]);
    optimizer_step(params, st, cfg);
    EXPECT_NEAR(params[0][0], 2.0 * std::pow(1 - 0.05 * 0.2, t), 1e-12);
    EXPECT_NEAR(params[0][1], -1.0 * std::pow(1 - 0.05 * 0.2, t), 1e-12);
  }
}

TEST(AdamW, ZeroGradientZeroDecayIsFixedPoint) {
  std::vector<TD> params{TD::parameter({3}, {0.1, 0.2, 0.3})};
  AdamWState st;
  for (int t = 0; t < 5; ++t) optimizer_step(params, st, AdamWConfig{0.1, 0.0});
  EXPECT_EQ(params[0].values(), (std::vector<double>{0.1, 0.2, 0.3}));
}

TEST(AdamW, NonFiniteGradientSkipsStep) {
  std::vector<TD> params{TD::parameter({2}, {1.0, 2.0})};
  AdamWState st;
  diff::grad_sink(params[0])[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(optimizer_step(params, st, AdamWConfig{}));
  EXPECT_EQ(st.skipped, 1u);
  EXPECT_EQ(st.step, 0u);
  EXPECT_EQ(params[0].values(), (std::vector<double>{1.0, 2.0}));
}

TEST(Synthetic, SeededPairsAreBitIdentical) {
  for (auto d : {Difficulty::easy, Difficulty::medium, Difficulty::hard}) {
    const auto a = generate_pair(42, 64, d), b = generate_pair(42, 64, d);
    EXPECT_EQ(a.image_a, b.image_a);
    EXPECT_EQ(a.image_b, b.image_b);
    EXPECT_EQ(a.h_true.rows(), b.h_true.rows());
  }
  EXPECT_NE(generate_pair(42, 64, Difficulty::easy).image_a,
            generate_pair(43, 64, Difficulty::easy).image_a);
}

TEST(Synthetic, ForcedIdentityHasZeroOffsets) {
  SynthOptions o;
  o.forced_h = geo::Homography();
  const auto p = generate_pair(7, 64, Difficulty::hard, o);
  ASSERT_EQ(p.gt.matches.size(), 64u);
  for (const auto& m : p.gt.matches) {
    EXPECT_EQ(m.offset.x, 0.0);
    EXPECT_EQ(m.offset.y, 0.0);
  }
}

TEST(Synthetic, PixelsAreEightBitLevels) {
  const auto p = generate_pair(8, 32, Difficulty::medium);
  for (const auto* img : {&p.image_a, &p.image_b})
    for (float v : img->pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      EXPECT_EQ(v, static_cast<float>(std::lround(v * 255.0)) / 255.0f);
    }
}

TEST(Synthetic, HardPairsKeepFewerCorrespondences) {
  double easy = 0, hard = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng re(derive_seed(s, kWarpStream)), rh(derive_seed(s, kWarpStream));
    easy += static_cast<double>(
        geo::make_ground_truth(sample_homography(re, Difficulty::easy, 64, 64), 64, 64).matches.size());
    hard += static_cast<double>(
        geo::make_ground_truth(sample_homography(rh, Difficulty::hard, 64, 64), 64, 64).matches.size());
  }
  EXPECT_LT(hard, easy);
}

TEST(Synthetic, RejectsBadSize) {
  EXPECT_THROW(generate_pair(1, 60, Difficulty::easy), InvalidArgument);
  EXPECT_THROW(parse_difficulty("extreme"), InvalidArgument);
}

TEST(TrainEpoch, ZeroLearningRateLeavesModelUnchanged) {
  auto m = model::Model<double>::init(tiny_model_config(), 3);
  auto tc = tiny_train_config();
  tc.lr = 0.0;
  tc.freeze_norms_after = 0;
  const auto data = make_dataset(11, 3, 32, Difficulty::easy);
  const auto before = snapshot(m);
  TrainState st;
  const auto rep = train_epoch(m, st, data, tc);
  EXPECT_EQ(rep.steps, 3u);
  EXPECT_EQ(snapshot(m), before);
}

TEST(TrainEpoch, SameSeedSameReportsAndWeights) {
  const auto data = make_dataset(12, 3, 32, Difficulty::easy);
  auto run = [&] {
    auto m = model::Model<double>::init(tiny_model_config(), 4);
    TrainState st;
    std::vector<EpochReport> reps;
    for (int e = 0; e < 2; ++e) reps.push_back(train_epoch(m, st, data, tiny_train_config()));
    return std::make_pair(reps, snapshot(m));
  };
  const auto [ra, wa] = run();
  const auto [rb, wb] = run();
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t k = 0; k < ra.size(); ++k) EXPECT_TRUE(ra[k].same_losses(rb[k]));
  EXPECT_EQ(wa, wb);
}

TEST(TrainEpoch, NormsFreezeAfterWarmup) {
  auto m = model::Model<double>::init(tiny_model_config(), 5);
  const auto data = make_dataset(13, 2, 32, Difficulty::easy);
  TrainState st;
  train_epoch(m, st, data, tiny_train_config());
  EXPECT_FALSE(m.norms_frozen());
  train_epoch(m, st, data, tiny_train_config());
  EXPECT_TRUE(m.norms_frozen());
}

TEST(TrainEpoch, TeacherForcedFineLossLeavesAttentionUntouched) {
  auto m = model::Model<double>::init(tiny_model_config(), 6);
  const auto pair = generate_pair(14, 32, Difficulty::easy);
  auto lc = tiny_train_config().loss_config();
  Tape<double> tape;
  const auto parts = model::pair_loss(tape, m, pair.image_a.to_tensor<double>(),
                                      pair.image_b.to_tensor<double>(), pair.gt, lc, false);
  ASSERT_TRUE(parts.fine_x && parts.fine_y);
  tape.backward(diff::scale(tape, diff::add(tape, *parts.fine_x, *parts.fine_y), lc.lambda_f));
  bool head_moved = false;
  for (double g : m.head_x.w1.grad()) head_moved = head_moved || g != 0.0;
  EXPECT_TRUE(head_moved);
  for (auto& layer : m.attention)
    layer.visit("a", [](const std::string& name, TD& t) {
      if (!t.has_grad()) return;
      for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
    });
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig tc;
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), InvalidArgument);
  tc = {};
  tc.image_size = 20;
  EXPECT_THROW(tc.validate(), InvalidArgument);
  tc = {};
  tc.lr = -1;
  EXPECT_THROW(tc.validate(), InvalidArgument);
}
