#pragma once

#include <functional>
#include <vector>

#include "sure/diffcore/gradcheck.hpp"
#include "sure/diffcore/ops.hpp"
#include "sure/rng.hpp"

namespace sure::testing {

using diff::Shape;
using diff::Tape;
using diff::Tensor;
using TD = Tensor<double>;

inline TD random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(diff::shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::parameter(std::move(shape), std::move(v));
}

inline std::vector<double> random_weights(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return w;
}

/// Worst gradient error of `op` over `trials` random draws of its inputs.
/// The op output is reduced by a fixed random weighting so every output
/// coordinate contributes.
inline double worst_grad_error(
    Rng& rng, std::size_t trials, const std::vector<Shape>& shapes,
    const std::function<TD(Tape<double>&, const std::vector<TD>&)>& op, double lo = -1.0,
    double hi = 1.0, double step = 1e-6) {
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<TD> in;
    for (const auto& s : shapes) in.push_back(random_param(rng, s, lo, hi));
    std::vector<double> w;
    {
      Tape<double> probe(Tape<double>::Mode::inference);
      w = random_weights(rng, op(probe, in).size());
    }
    const auto res = diff::check_gradients(
        [&](Tape<double>& tape) { return diff::weighted_sum(tape, op(tape, in), w); }, in, step);
    worst = std::max(worst, res.max_rel_error);
  }
  return worst;
}

}  // namespace sure::testing
