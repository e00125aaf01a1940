#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sure/coarse/matching.hpp"
#include "sure/diffcore/init.hpp"
#include "sure/diffcore/ops.hpp"

namespace sure::coarse {

/// Largest token count enhance_features accepts.
inline constexpr std::size_t kMaxAttentionTokens = 4096;

/// Query/key/value/output projections of one single-head attention block.
template <class T>
struct AttentionProj {
  Tensor<T> wq, wk, wv, wo;  // each [C x C], applied as X * W

  static AttentionProj init(Rng& rng, std::size_t c) {
    return {diff::kaiming_param<T>(rng, {c, c}, c, std::sqrt(0.5)),
            diff::kaiming_param<T>(rng, {c, c}, c, std::sqrt(0.5)),
            diff::kaiming_param<T>(rng, {c, c}, c, std::sqrt(0.5)),
            diff::kaiming_param<T>(rng, {c, c}, c, 0.1)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
  }
};

/// One self-attention and one cross-attention block, shared by both images.
template <class T>
struct AttentionWeights {
  AttentionProj<T> self;
  AttentionProj<T> cross;

  static AttentionWeights init(Rng& rng, std::size_t c) {
    auto s = AttentionProj<T>::init(rng, c);
    auto x = AttentionProj<T>::init(rng, c);
    return {std::move(s), std::move(x)};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    self.visit(prefix + ".self", f);
    cross.visit(prefix + ".cross", f);
  }
};

/// x + softmax((x Wq)(src Wk)^T / sqrt(C)) (src Wv) Wo over token matrices.
template <class T>
Tensor<T> attend(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& src, const AttentionProj<T>& w) {
  const auto c = x.dim(1);
  const auto q = diff::matmul(tape, x, w.wq);
  const auto k = diff::matmul(tape, src, w.wk);
  const auto v = diff::matmul(tape, src, w.wv);
  const auto scores = diff::scale(tape, diff::matmul(tape, q, k, false, true),
                                  T(1) / std::sqrt(static_cast<T>(c)));
  const auto attn = diff::softmax(tape, scores, 1);
  const auto msg = diff::matmul(tape, diff::matmul(tape, attn, v), w.wo);
  return diff::add(tape, x, msg);
}

template <class T>
struct EnhancedPair {
  Tensor<T> a;
  Tensor<T> b;
};

/// Self-attention within each image, then cross-attention in both directions,
/// for every layer in `layers`. Inputs and outputs are [C x H x W].
template <class T>
EnhancedPair<T> enhance_features(Tape<T>& tape, const Tensor<T>& fa, const Tensor<T>& fb,
                                 const std::vector<AttentionWeights<T>>& layers) {
  if (fa.rank() != 3 || fa.shape() != fb.shape())
    throw InvalidArgument("enhance_features: maps must share a [C x H x W] shape, got " +
                          diff::shape_str(fa.shape()) + " and " + diff::shape_str(fb.shape()));
  const auto c = fa.dim(0), h = fa.dim(1), w = fa.dim(2);
  if (h * w > kMaxAttentionTokens)
    throw InvalidArgument("enhance_features: " + std::to_string(h * w) +
                          " coarse cells exceed the limit of " +
                          std::to_string(kMaxAttentionTokens) + "; tile the input");
  auto ta = to_tokens(tape, fa);
  auto tb = to_tokens(tape, fb);
  for (const auto& layer : layers) {
    ta = attend(tape, ta, ta, layer.self);
    tb = attend(tape, tb, tb, layer.self);
    auto na = attend(tape, ta, tb, layer.cross);
    auto nb = attend(tape, tb, ta, layer.cross);
    ta = std::move(na);
    tb = std::move(nb);
  }
  auto back = [&](const Tensor<T>& tokens) {
    return diff::reshape(tape, diff::transpose(tape, tokens), {c, h, w});
  };
  return {back(ta), back(tb)};
}

template <class T>
EnhancedPair<T> enhance_features(Tape<T>& tape, const Tensor<T>& fa, const Tensor<T>& fb,
                                 const AttentionWeights<T>& layer) {
  return enhance_features(tape, fa, fb, std::vector<AttentionWeights<T>>{layer});
}

}  // namespace sure::coarse
