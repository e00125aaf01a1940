#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sure/diffcore/tensor.hpp"
#include "sure/error.hpp"

namespace sure::train {

struct AdamWConfig {
  double lr = 2e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers, one pair per parameter, in parameter order.
struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;
};

/// One AdamW update. Decay multiplies each weight by (1 - lr * wd) before the
/// bias-corrected moment step. Returns false, leaving parameters and moments
/// untouched, when any gradient is non-finite. Parameters without a gradient
/// are treated as having a zero gradient.
template <class T>
bool optimizer_step(std::vector<diff::Tensor<T>>& params, AdamWState& state,
                    const AdamWConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0) || !(cfg.eps > 0.0) ||
      !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw InvalidArgument("optimizer_step: invalid AdamW hyperparameters");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw StateError("optimizer_step: state was built for a different parameter list");
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad())
      if (!std::isfinite(static_cast<double>(g))) {
        ++state.skipped;
        return false;
      }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(p.grad()[i]) : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      double w = static_cast<double>(data[i]) * decay;
      w -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
      data[i] = static_cast<T>(w);
    }
  }
  return true;
}

}  // namespace sure::train
