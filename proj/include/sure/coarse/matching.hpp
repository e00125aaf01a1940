#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sure/diffcore/ops.hpp"
#include "sure/geometry/ground_truth.hpp"

namespace sure::coarse {

using diff::Tape;
using diff::Tensor;

struct CoarseMatch {
  std::size_t i = 0;  // cell index in A
  std::size_t j = 0;  // cell index in B
  double conf = 0.0;
};

/// Mutual-nearest-neighbour matches on the coarse grids. Each i and each j
/// occurs at most once and every conf is at least the threshold used.
struct CoarseMatchSet {
  std::vector<CoarseMatch> pairs;
  geo::CoarseGrid grid_a;
  geo::CoarseGrid grid_b;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Flattens a [C x H x W] map into a [H*W x C] token matrix (tokens already
/// in matrix form pass through).
template <class T>
Tensor<T> to_tokens(Tape<T>& tape, const Tensor<T>& f) {
  if (f.rank() == 2) return f;
  if (f.rank() != 3) throw InvalidArgument("to_tokens expects [C x H x W]");
  const auto c = f.dim(0), hw = f.dim(1) * f.dim(2);
  return diff::transpose(tape, diff::reshape(tape, f, {c, hw}));
}

/// S[i][j] = <fa(i), fb(j)> / tau over flattened cells.
template <class T>
Tensor<T> similarity_matrix(Tape<T>& tape, const Tensor<T>& fa, const Tensor<T>& fb, T tau) {
  if (!(tau > T(0))) throw InvalidArgument("similarity_matrix: tau must be positive");
  const auto ta = to_tokens(tape, fa);
  const auto tb = to_tokens(tape, fb);
  if (ta.dim(1) != tb.dim(1)) throw InvalidArgument("similarity_matrix: descriptor widths differ");
  return diff::scale(tape, diff::matmul(tape, ta, tb, false, true), T(1) / tau);
}

template <class T>
struct DualSoftmax {
  Tensor<T> p_ab;  // row-normalized
  Tensor<T> p_ba;  // column-normalized
  std::optional<Tensor<T>> log_ab;
  std::optional<Tensor<T>> log_ba;
};

/// With `with_log`, also returns the log-probabilities, which stay finite
/// where the probabilities underflow.
template <class T>
DualSoftmax<T> dual_softmax(Tape<T>& tape, const Tensor<T>& s, bool with_log = false) {
  if (s.rank() != 2) throw InvalidArgument("dual_softmax expects a matrix");
  DualSoftmax<T> d{diff::softmax(tape, s, 1), diff::softmax(tape, s, 0), std::nullopt,
                   std::nullopt};
  if (with_log) {
    d.log_ab = diff::log_softmax(tape, s, 1);
    d.log_ba = diff::log_softmax(tape, s, 0);
  }
  return d;
}

/// Keeps (i, j) when j is the row argmax of p_ab, i is the column argmax of
/// p_ba, and p_ab[i][j] * p_ba[i][j] >= tau_c. Argmax ties go to the lowest
/// index.
template <class T>
CoarseMatchSet mnn_filter(std::span<const T> p_ab, std::span<const T> p_ba, std::size_t rows,
                          std::size_t cols, double tau_c) {
  if (p_ab.size() != rows * cols || p_ba.size() != rows * cols)
    throw InvalidArgument("mnn_filter: matrix size mismatch");
  if (!(tau_c >= 0.0 && tau_c < 1.0)) throw InvalidArgument("mnn_filter: tau_c must be in [0, 1)");
  CoarseMatchSet out;
  if (rows == 0 || cols == 0) return out;
  std::vector<std::size_t> col_best(cols, 0);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 1; i < rows; ++i)
      if (p_ba[i * cols + j] > p_ba[col_best[j] * cols + j]) col_best[j] = i;
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (p_ab[i * cols + j] > p_ab[i * cols + best]) best = j;
    if (col_best[best] != i) continue;
    const double conf =
        static_cast<double>(p_ab[i * cols + best]) * static_cast<double>(p_ba[i * cols + best]);
    if (conf >= tau_c) out.pairs.push_back({i, best, conf});
  }
  return out;
}

template <class T>
CoarseMatchSet mnn_filter(const DualSoftmax<T>& p, double tau_c) {
  return mnn_filter<T>(p.p_ab.data(), p.p_ba.data(), p.p_ab.dim(0), p.p_ab.dim(1), tau_c);
}

}  // namespace sure::coarse
