#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sure/backbone/fusion.hpp"
#include "sure/coarse/attention.hpp"
#include "sure/coarse/matching.hpp"
#include "sure/evidential/filter.hpp"
#include "sure/evidential/head.hpp"
#include "sure/geometry/ground_truth.hpp"
#include "sure/train/losses.hpp"

namespace sure::model {

using diff::Tape;
using diff::Tensor;

/// Fine-head variants: direct offset regression, soft-argmax over bins with
/// an L2 or a KL objective, and the evidential head.
enum class HeadMode { direct_l2, coord_l2, coord_kl, evidential };

inline std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::direct_l2: return "direct_l2";
    case HeadMode::coord_l2: return "coord_l2";
    case HeadMode::coord_kl: return "coord_kl";
    case HeadMode::evidential: return "evidential";
  }
  return "evidential";
}

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "direct_l2") return HeadMode::direct_l2;
  if (s == "coord_l2") return HeadMode::coord_l2;
  if (s == "coord_kl") return HeadMode::coord_kl;
  if (s == "evidential") return HeadMode::evidential;
  throw InvalidArgument("unknown head mode '" + s +
                        "' (expected direct_l2, coord_l2, coord_kl or evidential)");
}

struct ModelConfig {
  backbone::BackboneConfig backbone;
  std::size_t c_fine = 64;
  std::size_t attention_layers = 1;
  std::size_t head_hidden = 128;
  std::size_t bins = 16;
  double tau = 0.1;
  HeadMode head_mode = HeadMode::evidential;
  bool fusion_enabled = true;
  double kl_sigma = 1.0;  // in bins

  std::size_t head_width() const {
    switch (head_mode) {
      case HeadMode::direct_l2: return 1;
      case HeadMode::coord_l2:
      case HeadMode::coord_kl: return bins;
      case HeadMode::evidential: return bins + 3;
    }
    return bins + 3;
  }

  void validate() const {
    if (bins < 2) throw InvalidArgument("bins must be at least 2");
    if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
    if (!(kl_sigma > 0.0)) throw InvalidArgument("kl_sigma must be positive");
    if (c_fine == 0 || head_hidden == 0 || backbone.c_half == 0 || backbone.c_quarter == 0 ||
        backbone.c_eighth == 0 || backbone.c_coarse == 0)
      throw InvalidArgument("layer widths must be positive");
  }
};

template <class T>
struct Model {
  ModelConfig cfg;
  backbone::BackboneWeights<T> backbone;
  backbone::FusionWeights<T> fusion;
  std::vector<coarse::AttentionWeights<T>> attention;
  evi::HeadWeights<T> head_x;
  evi::HeadWeights<T> head_y;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m{cfg, backbone::BackboneWeights<T>::init(rng, cfg.backbone),
            backbone::FusionWeights<T>::init(rng, cfg.backbone, cfg.c_fine), {}, {}, {}};
    for (std::size_t l = 0; l < cfg.attention_layers; ++l)
      m.attention.push_back(coarse::AttentionWeights<T>::init(rng, cfg.backbone.c_coarse));
    m.head_x = evi::HeadWeights<T>::init(rng, 2 * cfg.c_fine, cfg.head_hidden, cfg.head_width());
    m.head_y = evi::HeadWeights<T>::init(rng, 2 * cfg.c_fine, cfg.head_hidden, cfg.head_width());
    return m;
  }

  /// Calls f(name, tensor) for every trainable tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    backbone.visit("backbone", f);
    fusion.visit("fusion", f);
    for (std::size_t l = 0; l < attention.size(); ++l)
      attention[l].visit("attention" + std::to_string(l), f);
    head_x.visit("head_x", f);
    head_y.visit("head_y", f);
  }

  /// Calls f(name, ChannelNorm&) for every normalization layer.
  template <class F>
  void visit_norms(F&& f) {
    backbone.visit_norms("backbone", f);
    fusion.visit_norms("fusion", f);
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  void freeze_norms() {
    visit_norms([](const std::string&, backbone::ChannelNorm<T>& n) { n.frozen = true; });
  }
  bool norms_frozen() {
    bool all = true;
    visit_norms([&](const std::string&, backbone::ChannelNorm<T>& n) { all = all && n.frozen; });
    return all;
  }
};

template <class T>
struct PairFeatures {
  Tensor<T> fine_a;  // [C_f x H/8 x W/8]
  Tensor<T> fine_b;
  Tensor<T> coarse_a;  // after attention and C^-1/2 scaling
  Tensor<T> coarse_b;
  coarse::DualSoftmax<T> p;
  geo::CoarseGrid grid;
};

/// Backbone, fusion (or the 1/8 projection when fusion is off), attention and
/// dual softmax for one image pair of equal size.
template <class T>
PairFeatures<T> forward_features(Tape<T>& tape, Model<T>& m, const Tensor<T>& image_a,
                                 const Tensor<T>& image_b, bool train) {
  if (image_a.shape() != image_b.shape())
    throw InvalidArgument("image pair shapes differ: " + diff::shape_str(image_a.shape()) + " vs " +
                          diff::shape_str(image_b.shape()));
  auto pa = backbone::extract_pyramid(tape, image_a, m.backbone, train);
  auto pb = backbone::extract_pyramid(tape, image_b, m.backbone, train);
  PairFeatures<T> out;
  if (m.cfg.fusion_enabled) {
    out.fine_a = backbone::spatial_fusion(tape, pa, m.fusion, train);
    out.fine_b = backbone::spatial_fusion(tape, pb, m.fusion, train);
  } else {
    out.fine_a = backbone::eighth_only_features(tape, pa, m.fusion);
    out.fine_b = backbone::eighth_only_features(tape, pb, m.fusion);
  }
  const auto e = coarse::enhance_features(tape, pa.f_coarse, pb.f_coarse, m.attention);
  // descriptors enter the similarity scaled by C^-1/2
  const T unit = T(1) / std::sqrt(static_cast<T>(e.a.dim(0)));
  out.coarse_a = diff::scale(tape, e.a, unit);
  out.coarse_b = diff::scale(tape, e.b, unit);
  out.p = coarse::dual_softmax(
      tape, coarse::similarity_matrix(tape, out.coarse_a, out.coarse_b, static_cast<T>(m.cfg.tau)),
      train);
  out.grid = geo::CoarseGrid::for_image(image_a.dim(2), image_a.dim(1));
  return out;
}

template <class T>
struct AxisPrediction {
  Tensor<T> psi;  // [M]
  std::optional<Tensor<T>> logits;
  std::optional<evi::NigTensors<T>> nig;
};

template <class T>
struct FinePrediction {
  AxisPrediction<T> x;
  AxisPrediction<T> y;
};

template <class T>
AxisPrediction<T> axis_prediction(Tape<T>& tape, const Tensor<T>& out, HeadMode mode) {
  const auto m = out.dim(0);
  switch (mode) {
    case HeadMode::direct_l2:
      return {diff::reshape(tape, out, {m}), std::nullopt, std::nullopt};
    case HeadMode::coord_l2:
    case HeadMode::coord_kl:
      return {evi::soft_argmax(tape, out), out, std::nullopt};
    case HeadMode::evidential: {
      const auto split = evi::split_head_output(tape, out);
      auto nig = evi::nig_tensors(tape, split);
      return {nig.psi, split.logits, nig};
    }
  }
  throw InvalidArgument("unknown head mode");
}

/// Runs both heads on the fine descriptors of the given cell pairs.
template <class T>
FinePrediction<T> predict_fine(Tape<T>& tape, const Model<T>& m, const PairFeatures<T>& f,
                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  const auto desc = backbone::sample_fine_descriptors(tape, f.fine_a, f.fine_b, pairs);
  return {axis_prediction(tape, evi::head_apply(tape, desc, m.head_x), m.cfg.head_mode),
          axis_prediction(tape, evi::head_apply(tape, desc, m.head_y), m.cfg.head_mode)};
}

/// Which cell pairs the fine heads are trained on: the ground-truth pairs
/// (teacher forcing), the predicted mutual matches, or both. A pair whose B
/// cell is wrong is supervised with the true offset from that cell, which
/// lies outside [-0.5, 0.5].
enum class FineSupervision { teacher, predicted, mixed };

inline std::string to_string(FineSupervision s) {
  switch (s) {
    case FineSupervision::teacher: return "teacher";
    case FineSupervision::predicted: return "predicted";
    case FineSupervision::mixed: return "mixed";
  }
  return "teacher";
}

inline FineSupervision parse_fine_supervision(const std::string& s) {
  if (s == "teacher") return FineSupervision::teacher;
  if (s == "predicted") return FineSupervision::predicted;
  if (s == "mixed") return FineSupervision::mixed;
  throw InvalidArgument("unknown fine supervision '" + s + "' (expected teacher, predicted or mixed)");
}

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double lambda_c = 1.0;
  double lambda_f = 0.25;
  double zeta = 1.0;
  FineSupervision supervision = FineSupervision::teacher;
  bool coarse_negatives = false;
  double tau_c = 0.2;  // only for supervision on predicted matches
  std::size_t neighbor_pairs = 0;
  std::uint64_t neighbor_seed = 0;
};

template <class T>
struct LossParts {
  Tensor<T> total;
  Tensor<T> coarse;
  std::optional<Tensor<T>> fine_x;
  std::optional<Tensor<T>> fine_y;
  std::size_t supervised = 0;  // fine-supervised matches
};

template <class T>
std::optional<Tensor<T>> axis_loss(Tape<T>& tape, const AxisPrediction<T>& p, std::vector<T> y,
                                   const ModelConfig& cfg, T zeta) {
  if (y.empty()) return std::nullopt;
  switch (cfg.head_mode) {
    case HeadMode::direct_l2:
    case HeadMode::coord_l2: {
      const auto n = y.size();
      const auto target = Tensor<T>::constant({n}, std::move(y));
      return diff::mean(tape, diff::square(tape, diff::sub(tape, p.psi, target)));
    }
    case HeadMode::coord_kl:
      return evi::kl_bin_loss(tape, *p.logits, y, static_cast<T>(cfg.kl_sigma));
    case HeadMode::evidential:
      return evi::evidential_fine_loss(tape, *p.nig, std::move(y), zeta);
  }
  return std::nullopt;
}

/// Coarse focal loss on the ground-truth cell pairs plus the fine loss of
/// both heads on the pairs chosen by `lc.supervision`.
template <class T>
LossParts<T> pair_loss(Tape<T>& tape, Model<T>& m, const Tensor<T>& image_a,
                       const Tensor<T>& image_b, const geo::GroundTruth& gt, const LossConfig& lc,
                       bool train) {
  const auto f = forward_features(tape, m, image_a, image_b, train);
  const auto cells = train::gt_cell_pairs(gt);
  LossParts<T> out;
  out.coarse = train::coarse_loss(tape, f.p, cells, static_cast<T>(lc.alpha),
                                  static_cast<T>(lc.gamma), lc.coarse_negatives)
                   .value;

  std::vector<std::pair<std::size_t, std::size_t>> fine_pairs;
  std::vector<T> yx, yy;
  auto add = [&](std::size_t i, std::size_t j, geo::Point2 offset) {
    fine_pairs.emplace_back(i, j);
    yx.push_back(static_cast<T>(offset.x));
    yy.push_back(static_cast<T>(offset.y));
  };
  auto offset_in = [&](const geo::GtMatch& g, std::size_t j) {
    return (1.0 / f.grid.stride) * (g.b - f.grid.center(j));
  };
  if (lc.supervision != FineSupervision::predicted)
    for (const auto& g : gt.matches) add(g.cell_a, g.cell_b, g.offset);
  if (lc.supervision != FineSupervision::teacher) {
    const auto pred = coarse::mnn_filter(f.p, lc.tau_c);
    std::vector<const geo::GtMatch*> by_cell(f.grid.cells(), nullptr);
    for (const auto& g : gt.matches) by_cell[g.cell_a] = &g;
    for (const auto& p : pred.pairs) {
      const auto* g = by_cell[p.i];
      if (g == nullptr) continue;  // no valid warp for this cell
      const bool correct = g->cell_b == p.j;
      if (correct && lc.supervision == FineSupervision::mixed) continue;  // already added
      add(p.i, p.j, offset_in(*g, p.j));
    }
  }
  if (lc.neighbor_pairs > 0 && !gt.matches.empty()) {
    Rng rng(lc.neighbor_seed);
    const auto cols = f.grid.cols, rows = f.grid.rows;
    for (std::size_t k = 0; k < lc.neighbor_pairs; ++k) {
      const auto& g = gt.matches[rng.below(gt.matches.size())];
      const auto cx = static_cast<long>(g.cell_b % cols), cy = static_cast<long>(g.cell_b / cols);
      const long dx = static_cast<long>(rng.below(3)) - 1;
      const long dy = dx == 0 ? (rng.below(2) ? 1 : -1) : static_cast<long>(rng.below(3)) - 1;
      const long nx = cx + dx, ny = cy + dy;
      if (nx < 0 || ny < 0 || nx >= static_cast<long>(cols) || ny >= static_cast<long>(rows)) continue;
      const auto j = static_cast<std::size_t>(ny) * cols + static_cast<std::size_t>(nx);
      add(g.cell_a, j, offset_in(g, j));
    }
  }
  out.supervised = fine_pairs.size();
  if (!fine_pairs.empty()) {
    const auto fp = predict_fine(tape, m, f, fine_pairs);
    const T zeta = static_cast<T>(lc.zeta);
    out.fine_x = axis_loss(tape, fp.x, std::move(yx), m.cfg, zeta);
    out.fine_y = axis_loss(tape, fp.y, std::move(yy), m.cfg, zeta);
  }
  out.total = train::total_loss(tape, out.coarse, out.fine_x, out.fine_y,
                                static_cast<T>(lc.lambda_c), static_cast<T>(lc.lambda_f));
  return out;
}

struct MatchOptions {
  double tau_c = 0.2;
  double q_a = 0.95;
  double q_e = 0.95;
  bool filtering = true;
  /// Treat q_a / q_e as absolute uncertainty thresholds instead of quantile
  /// levels.
  bool absolute_thresholds = false;
};

struct MatchOutput {
  std::size_t coarse_count = 0;
  std::vector<evi::MatchWithUncertainty> all;   // refined, before filtering
  std::vector<evi::MatchWithUncertainty> kept;  // after filtering
};

/// Uncertainty-free heads report zero for both uncertainties.
template <class T>
evi::Uncertainty axis_uncertainty(const AxisPrediction<T>& p, std::size_t k) {
  if (!p.nig) return {};
  const double eta = p.nig->eta[k], kappa = p.nig->kappa[k], rho = p.nig->rho[k];
  return {rho / (kappa - 1.0), rho / (eta * (kappa - 1.0))};
}

template <class T>
std::vector<evi::MatchWithUncertainty> refine(const Model<T>& m, const PairFeatures<T>& f,
                                              const coarse::CoarseMatchSet& cm) {
  if (cm.empty()) return {};
  Tape<T> tape(Tape<T>::Mode::inference);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& p : cm.pairs) pairs.emplace_back(p.i, p.j);
  const auto fp = predict_fine(tape, m, f, pairs);
  std::vector<double> px(cm.size()), py(cm.size());
  for (std::size_t k = 0; k < cm.size(); ++k) {
    px[k] = fp.x.psi[k];
    py[k] = fp.y.psi[k];
  }
  auto out = evi::refine_matches(cm, px, py);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto u = evi::aggregate_uncertainty(axis_uncertainty(fp.x, k), axis_uncertainty(fp.y, k));
    out[k].u_a = u.u_a;
    out[k].u_e = u.u_e;
  }
  return out;
}

inline std::vector<evi::MatchWithUncertainty> apply_filter(
    const std::vector<evi::MatchWithUncertainty>& all, const MatchOptions& opts) {
  if (!opts.filtering) return all;
  if (opts.absolute_thresholds) return evi::filter_by_thresholds(all, {opts.q_a, opts.q_e});
  return evi::filter_by_uncertainty(all, opts.q_a, opts.q_e);
}

/// Full inference: coarse mutual matches above tau_c, refined in B by the
/// fine heads, then optionally filtered by uncertainty.
template <class T>
MatchOutput match(Model<T>& m, const Tensor<T>& image_a, const Tensor<T>& image_b,
                  const MatchOptions& opts) {
  Tape<T> tape(Tape<T>::Mode::inference);
  const auto f = forward_features(tape, m, image_a, image_b, false);
  auto cm = coarse::mnn_filter(f.p, opts.tau_c);
  cm.grid_a = f.grid;
  cm.grid_b = f.grid;
  MatchOutput out;
  out.coarse_count = cm.size();
  out.all = refine(m, f, cm);
  out.kept = apply_filter(out.all, opts);
  return out;
}

}  // namespace sure::model
