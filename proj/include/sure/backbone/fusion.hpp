#pragma once

#include <string>
#include <vector>

#include "sure/backbone/backbone.hpp"
#include "sure/coarse/matching.hpp"

namespace sure::backbone {

/// Projections and fusion convolutions of the spatial fusion module. All are
/// 1x1 convolutions into C_f channels.
template <class T>
struct FusionWeights {
  Conv<T> proj_half;
  Conv<T> proj_quarter;
  Conv<T> proj_eighth;
  ConvNorm<T> fuse;  // over the 3*C_f concatenation
  Conv<T> residual_proj;

  static FusionWeights init(Rng& rng, const BackboneConfig& cfg, std::size_t c_fine) {
    auto ph = Conv<T>::init(rng, cfg.c_half, c_fine, 1, 1);
    auto pq = Conv<T>::init(rng, cfg.c_quarter, c_fine, 1, 1);
    auto pe = Conv<T>::init(rng, cfg.c_eighth, c_fine, 1, 1);
    auto fu = ConvNorm<T>::init(rng, 3 * c_fine, c_fine, 1, 1, cfg.norm_enabled);
    auto rp = Conv<T>::init(rng, c_fine, c_fine, 1, 1);
    return {std::move(ph), std::move(pq), std::move(pe), std::move(fu), std::move(rp)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj_half.visit(prefix + ".proj_half", f);
    proj_quarter.visit(prefix + ".proj_quarter", f);
    proj_eighth.visit(prefix + ".proj_eighth", f);
    fuse.visit(prefix + ".fuse", f);
    residual_proj.visit(prefix + ".residual_proj", f);
  }
  template <class F>
  void visit_norms(const std::string& prefix, F&& f) {
    fuse.visit_norms(prefix + ".fuse", f);
  }
};

template <class T>
struct FusionParts {
  Tensor<T> fused;     // ReLU(norm(conv([P(half), P(quarter), eighth])))
  Tensor<T> residual;  // Pool(Conv(projected half))
  Tensor<T> fine;      // fused + residual
};

/// Projects each scale to C_f channels, average-pools the 1/2 and 1/4
/// projections onto the 1/8 grid, fuses the concatenation, and adds the
/// pooled high-resolution residual. Stores the result in `p.f_fine`.
template <class T>
FusionParts<T> spatial_fusion_parts(Tape<T>& tape, FeaturePyramid<T>& p, FusionWeights<T>& w,
                                    bool train = false) {
  const auto check = [](const Tensor<T>& f, const Conv<T>& c, const char* name) {
    if (f.dim(0) != c.w.dim(1))
      throw InvalidArgument(std::string("spatial_fusion: ") + name + " has " +
                            std::to_string(f.dim(0)) + " channels, projection expects " +
                            std::to_string(c.w.dim(1)));
  };
  check(p.f_half, w.proj_half, "1/2 map");
  check(p.f_quarter, w.proj_quarter, "1/4 map");
  check(p.f_eighth, w.proj_eighth, "1/8 map");

  const auto half = w.proj_half(tape, p.f_half);
  const auto quarter = diff::avg_pool2d(tape, w.proj_quarter(tape, p.f_quarter), 2);
  const auto eighth = w.proj_eighth(tape, p.f_eighth);
  const auto half_pooled = diff::avg_pool2d(tape, half, 4);
  const auto cat = diff::concat(tape, std::vector<Tensor<T>>{half_pooled, quarter, eighth});
  FusionParts<T> parts;
  parts.fused = w.fuse(tape, cat, train);
  parts.residual = diff::avg_pool2d(tape, w.residual_proj(tape, half), 4);
  parts.fine = diff::add(tape, parts.fused, parts.residual);
  p.f_fine = parts.fine;
  return parts;
}

template <class T>
Tensor<T> spatial_fusion(Tape<T>& tape, FeaturePyramid<T>& p, FusionWeights<T>& w,
                         bool train = false) {
  return spatial_fusion_parts(tape, p, w, train).fine;
}

/// Fine features without the fusion module: the 1/8 map projected to C_f.
template <class T>
Tensor<T> eighth_only_features(Tape<T>& tape, FeaturePyramid<T>& p, FusionWeights<T>& w) {
  auto f = w.proj_eighth(tape, p.f_eighth);
  p.f_fine = f;
  return f;
}

/// Row m is [f_a(:, i_m), f_b(:, j_m)] for the m-th cell pair; shape M x 2C_f.
template <class T>
Tensor<T> sample_fine_descriptors(Tape<T>& tape, const Tensor<T>& f_fine_a,
                                  const Tensor<T>& f_fine_b,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (f_fine_a.rank() != 3 || f_fine_a.shape() != f_fine_b.shape())
    throw InvalidArgument("sample_fine_descriptors: fine maps must share a [C x H x W] shape");
  const auto cells = f_fine_a.dim(1) * f_fine_a.dim(2);
  std::vector<std::size_t> ia, jb;
  ia.reserve(pairs.size());
  jb.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    if (i >= cells || j >= cells)
      throw InvalidArgument("sample_fine_descriptors: cell index (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") outside a grid of " + std::to_string(cells));
    ia.push_back(i);
    jb.push_back(j);
  }
  const auto ta = diff::gather_rows(tape, coarse::to_tokens(tape, f_fine_a), std::move(ia));
  const auto tb = diff::gather_rows(tape, coarse::to_tokens(tape, f_fine_b), std::move(jb));
  return diff::hconcat(tape, ta, tb);
}

template <class T>
Tensor<T> sample_fine_descriptors(Tape<T>& tape, const Tensor<T>& f_fine_a,
                                  const Tensor<T>& f_fine_b, const coarse::CoarseMatchSet& m) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& p : m.pairs) pairs.emplace_back(p.i, p.j);
  return sample_fine_descriptors(tape, f_fine_a, f_fine_b, pairs);
}

}  // namespace sure::backbone
