#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sure/diffcore/tensor.hpp"

namespace sure::diff {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic) + std::abs(numeric));
}

}  // namespace detail

/// Compares reverse-mode gradients of a scalar loss against central
/// differences. `loss` rebuilds the graph from the current values of `wrt`
/// on the tape it is given; every tensor in `wrt` must require a gradient.
/// `stride` > 1 checks only every stride-th coordinate of each tensor.
inline GradCheckResult check_gradients(
    const std::function<Tensor<double>(Tape<double>&)>& loss, std::vector<Tensor<double>> wrt,
    double step, std::size_t stride = 1) {
  if (!(step >= 1e-7 && step <= 1e-3))
    throw InvalidArgument("check_gradients: step must lie in [1e-7, 1e-3]");
  for (auto& t : wrt) {
    if (!t.requires_grad()) throw InvalidArgument("check_gradients: tensor does not require grad");
    t.clear_grad();
  }
  {
    Tape<double> tape;
    auto y = loss(tape);
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), 0.0);
  }

  auto eval = [&](std::size_t ti, std::size_t i) {
    Tape<double> tape(Tape<double>::Mode::inference);
    const double v = loss(tape).item();
    if (!std::isfinite(v))
      throw NumericError("check_gradients: non-finite loss when perturbing tensor " +
                         std::to_string(ti) + " coordinate " + std::to_string(i));
    return v;
  };

  GradCheckResult res;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto data = wrt[ti].mutable_data();
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double orig = data[i];
      data[i] = orig + step;
      const double fp = eval(ti, i);
      data[i] = orig - step;
      const double fm = eval(ti, i);
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = detail::rel_error(analytic[ti][i], numeric);
      ++res.coords_checked;
      if (err > res.max_rel_error || res.coords_checked == 1) {
        res.max_rel_error = std::max(err, res.max_rel_error);
        res.worst_tensor = ti;
        res.worst_index = i;
      }
    }
  }
  for (auto& t : wrt) t.clear_grad();
  return res;
}

/// Single-input form: max relative error of d f / d point.
inline double check_gradients(
    const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
    const Tensor<double>& point, double step) {
  auto x = point.clone(true);
  return check_gradients([&](Tape<double>& tape) { return f(tape, x); }, {x}, step).max_rel_error;
}

}  // namespace sure::diff
