#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sure/diffcore/init.hpp"
#include "sure/diffcore/ops.hpp"

namespace sure::backbone {

using diff::Tape;
using diff::Tensor;

/// Per-channel affine normalization standing in for batch norm. While
/// warming up it normalizes each map by its own (non-differentiated) channel
/// statistics and folds them into running estimates; once frozen it uses the
/// running estimates only.
template <class T>
struct ChannelNorm {
  Tensor<T> gamma;  // [C]
  Tensor<T> beta;   // [C]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool frozen = false;
  bool enabled = true;

  static constexpr T kMomentum = T(0.1);
  static constexpr T kEps = T(1e-5);

  static ChannelNorm init(std::size_t c, bool enabled = true) {
    return {diff::ones_param<T>({c}), diff::zeros_param<T>({c}), std::vector<T>(c, T(0)),
            std::vector<T>(c, T(1)), false, enabled};
  }

  /// `update_stats` is honoured only while the layer is not frozen.
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool update_stats) {
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<T> mean(c, T(0)), inv_std(c, T(1));
    if (!enabled) return diff::channel_normalize(tape, x, mean, inv_std, gamma, beta);
    if (update_stats && !frozen && hw > 0) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m = 0.0, v = 0.0;
        for (std::size_t p = 0; p < hw; ++p) m += x[ch * hw + p];
        m /= static_cast<double>(hw);
        for (std::size_t p = 0; p < hw; ++p) v += (x[ch * hw + p] - m) * (x[ch * hw + p] - m);
        v /= static_cast<double>(hw);
        mean[ch] = static_cast<T>(m);
        inv_std[ch] = T(1) / std::sqrt(static_cast<T>(v) + kEps);
        running_mean[ch] = (T(1) - kMomentum) * running_mean[ch] + kMomentum * static_cast<T>(m);
        running_var[ch] = (T(1) - kMomentum) * running_var[ch] + kMomentum * static_cast<T>(v);
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        mean[ch] = running_mean[ch];
        inv_std[ch] = T(1) / std::sqrt(running_var[ch] + kEps);
      }
    }
    return diff::channel_normalize(tape, x, std::move(mean), std::move(inv_std), gamma, beta);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <class T>
struct Conv {
  Tensor<T> w;  // [O x C x K x K]
  Tensor<T> b;  // [O]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv init(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                   double gain = 1.0) {
    return {diff::kaiming_param<T>(rng, {cout, cin, k, k}, cin * k * k, gain),
            diff::zeros_param<T>({cout}), stride, k / 2};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return diff::conv2d(tape, x, w, b, stride, padding);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

/// Conv -> norm, optionally followed by ReLU.
template <class T>
struct ConvNorm {
  Conv<T> conv;
  ChannelNorm<T> norm;

  static ConvNorm init(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k,
                       std::size_t stride, bool norm_enabled) {
    return {Conv<T>::init(rng, cin, cout, k, stride), ChannelNorm<T>::init(cout, norm_enabled)};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool train, bool activate = true) {
    auto y = norm(tape, conv(tape, x), train);
    return activate ? diff::relu(tape, y) : y;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv.visit(prefix + ".conv", f);
    norm.visit(prefix + ".norm", f);
  }
  template <class F>
  void visit_norms(const std::string& prefix, F&& f) {
    f(prefix + ".norm", norm);
  }
};

/// Stride-2 downsampling conv followed by one residual 3x3 block.
template <class T>
struct Stage {
  ConvNorm<T> down;
  ConvNorm<T> block;

  static Stage init(Rng& rng, std::size_t cin, std::size_t cout, bool norm_enabled) {
    return {ConvNorm<T>::init(rng, cin, cout, 3, 2, norm_enabled),
            ConvNorm<T>::init(rng, cout, cout, 3, 1, norm_enabled)};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool train) {
    const auto y = down(tape, x, train);
    const auto r = block(tape, y, train, /*activate=*/false);
    return diff::relu(tape, diff::add(tape, y, r));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    down.visit(prefix + ".down", f);
    block.visit(prefix + ".block", f);
  }
  template <class F>
  void visit_norms(const std::string& prefix, F&& f) {
    down.visit_norms(prefix + ".down", f);
    block.visit_norms(prefix + ".block", f);
  }
};

struct BackboneConfig {
  std::size_t c_half = 16;
  std::size_t c_quarter = 32;
  std::size_t c_eighth = 64;
  std::size_t c_coarse = 64;
  bool norm_enabled = true;
};

template <class T>
struct FeaturePyramid {
  Tensor<T> f_half;     // [C2 x H/2 x W/2]
  Tensor<T> f_quarter;  // [C4 x H/4 x W/4]
  Tensor<T> f_eighth;   // [C8 x H/8 x W/8]
  Tensor<T> f_coarse;   // [Cc x H/8 x W/8]
  std::optional<Tensor<T>> f_fine;
};

template <class T>
struct BackboneWeights {
  Stage<T> half;
  Stage<T> quarter;
  Stage<T> eighth;
  ConvNorm<T> coarse;

  static BackboneWeights init(Rng& rng, const BackboneConfig& cfg) {
    auto s1 = Stage<T>::init(rng, 1, cfg.c_half, cfg.norm_enabled);
    auto s2 = Stage<T>::init(rng, cfg.c_half, cfg.c_quarter, cfg.norm_enabled);
    auto s3 = Stage<T>::init(rng, cfg.c_quarter, cfg.c_eighth, cfg.norm_enabled);
    auto c = ConvNorm<T>::init(rng, cfg.c_eighth, cfg.c_coarse, 3, 1, cfg.norm_enabled);
    return {std::move(s1), std::move(s2), std::move(s3), std::move(c)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    half.visit(prefix + ".half", f);
    quarter.visit(prefix + ".quarter", f);
    eighth.visit(prefix + ".eighth", f);
    coarse.visit(prefix + ".coarse", f);
  }
  template <class F>
  void visit_norms(const std::string& prefix, F&& f) {
    half.visit_norms(prefix + ".half", f);
    quarter.visit_norms(prefix + ".quarter", f);
    eighth.visit_norms(prefix + ".eighth", f);
    coarse.visit_norms(prefix + ".coarse", f);
  }
};

/// Three stride-2 stages give the 1/2, 1/4 and 1/8 maps; a further 3x3 conv
/// with normalization (no activation) yields the coarse descriptors.
template <class T>
FeaturePyramid<T> extract_pyramid(Tape<T>& tape, const Tensor<T>& image, BackboneWeights<T>& w,
                                  bool train = false) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw InvalidArgument("extract_pyramid expects a [1 x H x W] image, got " +
                          diff::shape_str(image.shape()));
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0 || image.dim(1) == 0 || image.dim(2) == 0)
    throw InvalidArgument("extract_pyramid: image dimensions " + diff::shape_str(image.shape()) +
                          " are not positive multiples of 8; pad first");
  FeaturePyramid<T> p;
  p.f_half = w.half(tape, image, train);
  p.f_quarter = w.quarter(tape, p.f_half, train);
  p.f_eighth = w.eighth(tape, p.f_quarter, train);
  p.f_coarse = w.coarse(tape, p.f_eighth, train, /*activate=*/false);
  return p;
}

}  // namespace sure::backbone
