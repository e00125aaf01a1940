#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sure/diffcore/init.hpp"
#include "sure/diffcore/ops.hpp"
#include "sure/evidential/nig.hpp"

namespace sure::evi {

using diff::Tape;
using diff::Tensor;

/// Two pointwise 1-D convolutions over the fused descriptor (treated as
/// 2d channels of length 1) with a ReLU in between.
template <class T>
struct HeadWeights {
  Tensor<T> w1;  // [hidden x 2d x 1]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [out x hidden x 1]
  Tensor<T> b2;  // [out]

  static HeadWeights init(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
    return {diff::kaiming_param<T>(rng, {hidden, in, 1}, in), diff::zeros_param<T>({hidden}),
            diff::kaiming_param<T>(rng, {out, hidden, 1}, hidden, 0.1),
            diff::zeros_param<T>({out})};
  }

  std::size_t in_width() const { return w1.dim(1); }
  std::size_t out_width() const { return w2.dim(0); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

/// Raw per-match outputs of one axis head.
template <class T>
struct HeadOutput {
  Tensor<T> logits;  // [M x N]
  Tensor<T> raw;     // [M x 3]: pre-activation eta, kappa, rho
};

/// Applies one head: [M x 2d] -> [M x out].
template <class T>
Tensor<T> head_apply(Tape<T>& tape, const Tensor<T>& fused, const HeadWeights<T>& w) {
  if (fused.rank() != 2 || fused.dim(1) != w.in_width())
    throw InvalidArgument("head: descriptor shape " + diff::shape_str(fused.shape()) +
                          " does not match head input width " + std::to_string(w.in_width()));
  if (w.w2.dim(1) != w.w1.dim(0) || w.b1.size() != w.w1.dim(0) || w.b2.size() != w.w2.dim(0))
    throw InvalidArgument("head: inconsistent weight shapes");
  const auto m = fused.dim(0);
  const auto x = diff::reshape(tape, fused, {m, w.in_width(), 1});
  const auto h = diff::relu(tape, diff::conv1d(tape, x, w.w1, w.b1));
  const auto y = diff::conv1d(tape, h, w.w2, w.b2);
  return diff::reshape(tape, y, {m, w.out_width()});
}

template <class T>
HeadOutput<T> split_head_output(Tape<T>& tape, const Tensor<T>& out) {
  const auto width = out.dim(1);
  if (width < 5) throw InvalidArgument("evidential head output must have N + 3 >= 5 columns");
  return {diff::slice_cols(tape, out, 0, width - 3), diff::slice_cols(tape, out, width - 3, 3)};
}

/// Runs the x and y heads on the same descriptors.
template <class T>
std::pair<HeadOutput<T>, HeadOutput<T>> head_forward(Tape<T>& tape, const Tensor<T>& fused,
                                                     const HeadWeights<T>& wx,
                                                     const HeadWeights<T>& wy) {
  return {split_head_output(tape, head_apply(tape, fused, wx)),
          split_head_output(tape, head_apply(tape, fused, wy))};
}

/// Expected bin center under softmax(logits) per row; bins centered at
/// (k + 0.5) / N - 0.5.
template <class T>
Tensor<T> soft_argmax(Tape<T>& tape, const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(1) < 2)
    throw InvalidArgument("soft_argmax expects [M x N] logits with N >= 2");
  const auto m = logits.dim(0), n = logits.dim(1);
  std::vector<T> centers(n);
  for (std::size_t k = 0; k < n; ++k) centers[k] = static_cast<T>(bin_center(k, n));
  const auto c = Tensor<T>::constant({n, 1}, std::move(centers));
  const auto p = diff::softmax(tape, logits, 1);
  return diff::reshape(tape, diff::matmul(tape, p, c), {m});
}

template <class T>
struct NigTensors {
  Tensor<T> psi, eta, kappa, rho;  // each [M]
};

/// eta = softplus(a) + eps, kappa = 1 + softplus(b) + eps, rho = softplus(c) + eps.
template <class T>
NigTensors<T> nig_tensors(Tape<T>& tape, const HeadOutput<T>& out) {
  const auto m = out.raw.dim(0);
  auto col = [&](std::size_t k) {
    return diff::reshape(tape, diff::slice_cols(tape, out.raw, k, 1), {m});
  };
  const T eps = static_cast<T>(kPositivityEps);
  return {soft_argmax(tape, out.logits), diff::add_scalar(tape, diff::softplus(tape, col(0)), eps),
          diff::add_scalar(tape, diff::softplus(tape, col(1)), T(1) + eps),
          diff::add_scalar(tape, diff::softplus(tape, col(2)), eps)};
}

/// Per-match NLL + zeta * Reg, shape [M], with analytic gradients.
template <class T>
Tensor<T> evidential_loss_terms(Tape<T>& tape, const NigTensors<T>& p, std::vector<T> y,
                                T zeta) {
  const auto m = p.psi.size();
  if (y.size() != m) throw InvalidArgument("evidential_loss_terms: label count mismatch");
  std::vector<T> out(m);
  std::vector<T> d_psi(m), d_eta(m), d_kappa(m), d_rho(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto t = evidential_nll_terms<T>(p.psi[i], p.eta[i], p.kappa[i], p.rho[i], y[i]);
    const T r = y[i] - p.psi[i];
    const T phi = T(2) * p.eta[i] + p.kappa[i];
    const T sgn = r > T(0) ? T(1) : (r < T(0) ? T(-1) : T(0));
    out[i] = t.value + zeta * std::abs(r) * phi;
    d_psi[i] = t.d_psi - zeta * sgn * phi;
    d_eta[i] = t.d_eta + zeta * T(2) * std::abs(r);
    d_kappa[i] = t.d_kappa + zeta * std::abs(r);
    d_rho[i] = t.d_rho;
  }
  return tape.emit(diff::Shape{m}, std::move(out), {&p.psi, &p.eta, &p.kappa, &p.rho},
                   [p, d_psi = std::move(d_psi), d_eta = std::move(d_eta),
                    d_kappa = std::move(d_kappa), d_rho = std::move(d_rho)](std::span<const T> g) {
                     auto apply = [&](const Tensor<T>& t, const std::vector<T>& d) {
                       auto gt = diff::grad_sink(t);
                       for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i] * d[i];
                     };
                     apply(p.psi, d_psi);
                     apply(p.eta, d_eta);
                     apply(p.kappa, d_kappa);
                     apply(p.rho, d_rho);
                   });
}

/// Mean evidential loss over matches; nullopt when there are no matches.
template <class T>
std::optional<Tensor<T>> evidential_fine_loss(Tape<T>& tape, const NigTensors<T>& p,
                                              std::vector<T> y, T zeta) {
  if (p.psi.size() == 0) return std::nullopt;
  return diff::mean(tape, evidential_loss_terms(tape, p, std::move(y), zeta));
}

/// Gaussian target over the bins, centered at y with `sigma` measured in bins.
template <class T>
std::vector<T> gaussian_bin_target(T y, std::size_t bins, T sigma) {
  std::vector<T> t(bins);
  T z = T(0);
  for (std::size_t k = 0; k < bins; ++k) {
    const T d = (static_cast<T>(bin_center(k, bins)) - y) * static_cast<T>(bins) / sigma;
    t[k] = std::exp(T(-0.5) * d * d);
    z += t[k];
  }
  for (auto& v : t) v /= z;
  return t;
}

/// Mean over matches of KL(target || softmax(logits)).
template <class T>
Tensor<T> kl_bin_loss(Tape<T>& tape, const Tensor<T>& logits, const std::vector<T>& y, T sigma) {
  const auto m = logits.dim(0), n = logits.dim(1);
  std::vector<T> w(m * n);
  T entropy = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto t = gaussian_bin_target(y[i], n, sigma);
    for (std::size_t k = 0; k < n; ++k) {
      w[i * n + k] = -t[k] / static_cast<T>(m);
      if (t[k] > T(0)) entropy += t[k] * std::log(t[k]) / static_cast<T>(m);
    }
  }
  const auto ce = diff::weighted_sum(tape, diff::log_softmax(tape, logits, 1), std::move(w));
  return diff::add_scalar(tape, ce, entropy);
}

}  // namespace sure::evi
