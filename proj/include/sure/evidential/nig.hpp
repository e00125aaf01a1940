#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sure/error.hpp"

namespace sure::evi {

/// Normal-Inverse-Gamma posterior over one axis offset.
///   psi   - predicted offset (posterior mean location), in [-0.5, 0.5]
///   eta   - evidence for the mean, > 0
///   kappa - inverse-gamma shape, > 1
///   rho   - inverse-gamma scale, > 0
struct NIGParams {
  double psi = 0.0;
  double eta = 1.0;
  double kappa = 2.0;
  double rho = 1.0;
};

struct Moments {
  double z_hat = 0.0;
  double u_a = 0.0;  // aleatoric: rho / (kappa - 1)
  double u_e = 0.0;  // epistemic: rho / (eta (kappa - 1))
};

/// Floor applied inside logarithms of the evidential NLL.
inline constexpr double kLogFloor = 1e-30;
/// Offset added after softplus so parameters stay strictly inside their domain.
inline constexpr double kPositivityEps = 1e-6;

inline std::string describe(const NIGParams& p) {
  std::ostringstream os;
  os.precision(17);
  os << "(psi=" << p.psi << ", eta=" << p.eta << ", kappa=" << p.kappa << ", rho=" << p.rho << ")";
  return os.str();
}

inline void validate(const NIGParams& p) {
  if (!(std::isfinite(p.psi) && p.eta > 0.0 && p.kappa > 1.0 && p.rho > 0.0 &&
        std::isfinite(p.eta) && std::isfinite(p.kappa) && std::isfinite(p.rho)))
    throw InvalidArgument("invalid NIG parameters " + describe(p));
}

inline Moments predictive_moments(const NIGParams& p) {
  validate(p);
  const double km1 = p.kappa - 1.0;
  return {p.psi, p.rho / km1, p.rho / (p.eta * km1)};
}

/// Digamma for x > 0: recurrence up to x >= 10, then the asymptotic series.
template <class T>
T digamma(T x) {
  T acc = T(0);
  while (x < T(10)) {
    acc -= T(1) / x;
    x += T(1);
  }
  const T inv = T(1) / x;
  const T inv2 = inv * inv;
  const T series =
      inv2 * (T(1) / 12 - inv2 * (T(1) / 120 - inv2 * (T(1) / 252 - inv2 * (T(1) / 240 - inv2 * (T(1) / 132)))));
  return acc + std::log(x) - T(0.5) * inv - series;
}

/// Per-sample evidential loss terms and their partial derivatives.
template <class T>
struct NllTerms {
  T value;
  T d_psi, d_eta, d_kappa, d_rho;
};

/// Negative log model evidence of y under the Student-t marginal of the NIG:
///   1/2 log(pi/eta) - kappa log(Theta) + (kappa + 1/2) log((y - psi)^2 eta + Theta)
///   + log Gamma(kappa) - log Gamma(kappa + 1/2),   Theta = 2 rho (1 + eta).
template <class T>
NllTerms<T> evidential_nll_terms(T psi, T eta, T kappa, T rho, T y) {
  const T theta = T(2) * rho * (T(1) + eta);
  const T r = y - psi;
  const T d = r * r * eta + theta;
  if (!(theta > T(kLogFloor)) || !(d > T(kLogFloor)) || !(eta > T(kLogFloor))) {
    throw NumericError("evidential NLL log floor reached at " +
                       describe({double(psi), double(eta), double(kappa), double(rho)}));
  }
  const T half = T(0.5);
  NllTerms<T> t{};
  t.value = half * std::log(std::numbers::pi_v<T> / eta) - kappa * std::log(theta) +
            (kappa + half) * std::log(d) + std::lgamma(kappa) - std::lgamma(kappa + half);
  t.d_psi = (kappa + half) * (T(-2) * r * eta) / d;
  t.d_eta = -half / eta - kappa * T(2) * rho / theta + (kappa + half) * (r * r + T(2) * rho) / d;
  t.d_kappa = -std::log(theta) + std::log(d) + digamma(kappa) - digamma(kappa + half);
  t.d_rho = -kappa / rho + (kappa + half) * T(2) * (T(1) + eta) / d;
  if (!std::isfinite(t.value))
    throw NumericError("evidential NLL is not finite at " +
                       describe({double(psi), double(eta), double(kappa), double(rho)}));
  return t;
}

inline double evidential_nll(const NIGParams& p, double y_star) {
  validate(p);
  return evidential_nll_terms<double>(p.psi, p.eta, p.kappa, p.rho, y_star).value;
}

/// |y - psi| * (2 eta + kappa): penalizes evidence spent on a wrong prediction.
inline double evidential_reg(const NIGParams& p, double y_star) {
  validate(p);
  return std::abs(y_star - p.psi) * (2.0 * p.eta + p.kappa);
}

struct FineLossResult {
  double value = 0.0;
  bool empty = false;  // no supervised matches this step
};

/// Mean over matches of NLL + zeta * Reg.
inline FineLossResult fine_loss(std::span<const NIGParams> params, std::span<const double> y_stars,
                                double zeta) {
  if (params.size() != y_stars.size())
    throw InvalidArgument("fine_loss: parameter and label counts differ");
  if (zeta < 0.0) throw InvalidArgument("fine_loss: zeta must be non-negative");
  if (params.empty()) return {0.0, true};
  double acc = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    acc += evidential_nll(params[i], y_stars[i]) + zeta * evidential_reg(params[i], y_stars[i]);
  return {acc / static_cast<double>(params.size()), false};
}

struct Uncertainty {
  double u_a = 0.0;
  double u_e = 0.0;
};

/// Mean of the per-axis uncertainties.
inline Uncertainty aggregate_uncertainty(Uncertainty x, Uncertainty y) {
  if (x.u_a < 0 || x.u_e < 0 || y.u_a < 0 || y.u_e < 0)
    throw InvalidArgument("aggregate_uncertainty: uncertainties must be non-negative");
  return {(x.u_a + y.u_a) / 2.0, (x.u_e + y.u_e) / 2.0};
}

/// Bin center k of N equal bins spanning [-0.5, 0.5].
inline double bin_center(std::size_t k, std::size_t bins) {
  return (static_cast<double>(k) + 0.5) / static_cast<double>(bins) - 0.5;
}

/// Maps unconstrained head outputs to a valid (eta, kappa, rho).
template <class T>
T positive_param(T raw) {
  const T v = raw > T(0) ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
  return v + T(kPositivityEps);
}

inline NIGParams nig_from_raw(double psi, double raw_eta, double raw_kappa, double raw_rho) {
  return {psi, positive_param(raw_eta), 1.0 + positive_param(raw_kappa), positive_param(raw_rho)};
}

}  // namespace sure::evi
