#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "sure/coarse/matching.hpp"
#include "sure/diffcore/ops.hpp"
#include "sure/error.hpp"
#include "sure/geometry/ground_truth.hpp"

namespace sure::train {

using diff::Tape;
using diff::Tensor;

inline constexpr double kProbFloor = 1e-12;

/// -alpha (1 - p)^gamma log p, with p floored at 1e-12.
inline double focal_loss(double p, double alpha, double gamma) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("focal_loss: p must lie in [0, 1]");
  const double q = std::max(p, kProbFloor);
  return -alpha * std::pow(1.0 - q, gamma) * std::log(q);
}

namespace detail {

/// Elementwise focal loss with its derivative in p. Below the floor the
/// derivative is zero.
template <class T>
Tensor<T> focal_elements(Tape<T>& tape, const Tensor<T>& p, T alpha, T gamma) {
  const auto n = p.size();
  std::vector<T> out(n), d(n);
  for (std::size_t k = 0; k < n; ++k) {
    const bool floored = !(p[k] > static_cast<T>(kProbFloor));
    const T q = floored ? static_cast<T>(kProbFloor) : std::min(p[k], T(1));
    const T om = T(1) - q;
    const T lg = std::log(q);
    out[k] = -alpha * std::pow(om, gamma) * lg;
    if (floored) {
      d[k] = T(0);
    } else {
      const T dpow = gamma == T(0) ? T(0) : gamma * std::pow(om, gamma - T(1));
      d[k] = alpha * (dpow * lg - std::pow(om, gamma) / q);
    }
  }
  return tape.emit(p.shape(), std::move(out), {&p}, [p, d = std::move(d)](std::span<const T> g) {
    auto gp = diff::grad_sink(p);
    for (std::size_t k = 0; k < gp.size(); ++k) gp[k] += g[k] * d[k];
  });
}

/// Focal loss written in terms of l = log p, so saturated probabilities keep
/// a gradient.
template <class T>
Tensor<T> focal_from_log(Tape<T>& tape, const Tensor<T>& logp, T alpha, T gamma) {
  const auto n = logp.size();
  std::vector<T> out(n), d(n);
  for (std::size_t k = 0; k < n; ++k) {
    const T l = std::min(logp[k], T(0));
    const T p = std::exp(l);
    const T om = T(1) - p;
    const T w = std::pow(om, gamma);
    out[k] = -alpha * w * l;
    const T dpow = gamma == T(0) ? T(0) : gamma * std::pow(om, gamma - T(1));
    d[k] = -alpha * w + alpha * dpow * p * l;
  }
  return tape.emit(logp.shape(), std::move(out), {&logp},
                   [logp, d = std::move(d)](std::span<const T> g) {
                     auto gl = diff::grad_sink(logp);
                     for (std::size_t k = 0; k < gl.size(); ++k) gl[k] += g[k] * d[k];
                   });
}

}  // namespace detail

template <class T>
struct CoarseLoss {
  Tensor<T> value;
  bool empty = false;
};

/// Mean focal loss over the ground-truth entries of p_ab plus the same over
/// p_ba, read from the log-probabilities when the softmax carries them. With
/// `negatives` set, adds the mean of -(1 - alpha) p^gamma log(1 - p) over all
/// other entries of both matrices.
template <class T>
CoarseLoss<T> coarse_loss(Tape<T>& tape, const coarse::DualSoftmax<T>& p,
                          const std::vector<std::pair<std::size_t, std::size_t>>& gt, T alpha,
                          T gamma, bool negatives = false) {
  if (p.p_ab.shape() != p.p_ba.shape() || p.p_ab.rank() != 2)
    throw InvalidArgument("coarse_loss: probability matrices must share a 2-D shape");
  if (gt.empty()) return {Tensor<T>::scalar(T(0)), true};
  auto term = [&](const Tensor<T>& m, const std::optional<Tensor<T>>& logm) {
    if (logm) {
      const auto sel = diff::gather_elements(tape, *logm, gt);
      return diff::mean(tape, detail::focal_from_log(tape, sel, alpha, gamma));
    }
    const auto sel = diff::gather_elements(tape, m, gt);
    return diff::mean(tape, detail::focal_elements(tape, sel, alpha, gamma));
  };
  auto value = diff::add(tape, term(p.p_ab, p.log_ab), term(p.p_ba, p.log_ba));
  if (negatives) {
    const auto rows = p.p_ab.dim(0), cols = p.p_ab.dim(1);
    std::vector<char> positive(rows * cols, 0);
    for (const auto& [i, j] : gt) positive[i * cols + j] = 1;
    std::vector<std::pair<std::size_t, std::size_t>> neg;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        if (!positive[i * cols + j]) neg.emplace_back(i, j);
    if (!neg.empty()) {
      auto neg_term = [&](const Tensor<T>& m) {
        const auto sel = diff::gather_elements(tape, m, neg);
        // focal on (1 - p) with weight 1 - alpha
        const auto comp = diff::add_scalar(tape, diff::scale(tape, sel, T(-1)), T(1));
        return diff::mean(tape, detail::focal_elements(tape, comp, T(1) - alpha, gamma));
      };
      value = diff::add(tape, value, diff::add(tape, neg_term(p.p_ab), neg_term(p.p_ba)));
    }
  }
  return {value, false};
}

inline std::vector<std::pair<std::size_t, std::size_t>> gt_cell_pairs(const geo::GroundTruth& gt) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(gt.matches.size());
  for (const auto& m : gt.matches) out.emplace_back(m.cell_a, m.cell_b);
  return out;
}

/// lambda_c * l_c + lambda_f * (l_fx + l_fy).
inline double total_loss(double l_c, double l_fx, double l_fy, double lambda_c, double lambda_f) {
  return lambda_c * l_c + lambda_f * (l_fx + l_fy);
}

template <class T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_c, const std::optional<Tensor<T>>& l_fx,
                     const std::optional<Tensor<T>>& l_fy, T lambda_c, T lambda_f) {
  auto out = diff::scale(tape, l_c, lambda_c);
  if (l_fx) out = diff::add(tape, out, diff::scale(tape, *l_fx, lambda_f));
  if (l_fy) out = diff::add(tape, out, diff::scale(tape, *l_fy, lambda_f));
  return out;
}

}  // namespace sure::train
