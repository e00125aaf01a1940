#pragma once

#include <cmath>
#include <vector>

#include "sure/diffcore/tensor.hpp"
#include "sure/rng.hpp"

namespace sure::diff {

/// Kaiming (He) normal initialization scaled by fan-in, times `gain`.
template <class T>
Tensor<T> kaiming_param(Rng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::parameter(std::move(shape), std::move(data));
}

template <class T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <class T>
Tensor<T> ones_param(Shape shape) {
  const auto n = shape_size(shape);
  return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, T(1)));
}

}  // namespace sure::diff
