#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sure/diffcore/tensor.hpp"

namespace sure::diff {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

// C[M x N] += op(A) * op(B), row-major. op(A) is M x K, op(B) is K x N.
template <class T>
void gemm_acc(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
              const T* a, const T* b, T* c) {
  if (m == 0 || n == 0 || k == 0) return;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap<T> C(c, M, N);
  if (!trans_a && !trans_b)
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  else if (trans_a && !trans_b)
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  else if (!trans_a && trans_b)
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  else
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// Splits a shape around `axis` into (outer, axis length, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                    std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

template <class T>
T softplus_scalar(T x) {
  const T v = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return std::max(v, std::numeric_limits<T>::min());
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return tape.emit(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
  });
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return tape.emit(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return tape.emit(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
    auto gb = grad_sink(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
  });
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return tape.emit(a.shape(), std::move(out), {&a}, [a, s](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
  });
}

template <class T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return tape.emit(a.shape(), std::move(out), {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return tape.emit(a.shape(), std::move(out), {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * a[i] * g[i];
  });
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return tape.emit(a.shape(), std::move(out), {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (a[i] > T(0)) ga[i] += g[i];
  });
}

/// log(1 + exp(x)), evaluated without overflow and floored at the smallest
/// normal value so the result is always strictly positive.
template <class T>
Tensor<T> softplus(Tape<T>& tape, const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (std::isnan(a[i])) throw InvalidArgument("softplus: NaN input at index " + std::to_string(i));
    out[i] = detail::softplus_scalar(a[i]);
  }
  return tape.emit(a.shape(), std::move(out), {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * detail::sigmoid_scalar(a[i]);
  });
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = T(0);
  for (auto v : a.data()) s += v;
  return tape.emit(Shape{1}, {s}, {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (auto& v : ga) v += g[0];
  });
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  detail::require(a.size() > 0, "mean of empty tensor");
  const T inv = T(1) / static_cast<T>(a.size());
  T s = T(0);
  for (auto v : a.data()) s += v;
  return tape.emit(Shape{1}, {s * inv}, {&a}, [a, inv](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (auto& v : ga) v += g[0] * inv;
  });
}

/// Sum of `w[i] * a[i]` with a constant weight vector.
template <class T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& a, std::vector<T> w) {
  detail::require(w.size() == a.size(), "weighted_sum: weight length mismatch");
  T s = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a[i];
  return tape.emit(Shape{1}, {s}, {&a}, [a, w = std::move(w)](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(),
                  "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return tape.emit(std::move(shape), a.values(), {&a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose expects a matrix");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return tape.emit(Shape{c, r}, std::move(out), {&a}, [a, r, c](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

/// Concatenation along axis 0.
template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    detail::require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
                    "concat: trailing shape mismatch");
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return tape.emit(std::move(shape), std::move(out), std::span<const Tensor<T>* const>(inputs),
                   [parts](std::span<const T> g) {
                     std::size_t off = 0;
                     for (const auto& p : parts) {
                       auto gp = grad_sink(p);
                       for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
                       off += p.size();
                     }
                   });
}

/// [a | b] for matrices with equal row counts.
template <class T>
Tensor<T> hconcat(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
                  "hconcat: row count mismatch " + shape_str(a.shape()) + " | " +
                      shape_str(b.shape()));
  const auto rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cols = ca + cb;
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, out.begin() + i * cols);
    std::copy_n(b.data().begin() + i * cb, cb, out.begin() + i * cols + ca);
  }
  return tape.emit(Shape{rows, cols}, std::move(out), {&a, &b},
                   [a, b, rows, ca, cb, cols](std::span<const T> g) {
                     auto ga = grad_sink(a);
                     auto gb = grad_sink(b);
                     for (std::size_t i = 0; i < rows; ++i) {
                       for (std::size_t j = 0; !ga.empty() && j < ca; ++j)
                         ga[i * ca + j] += g[i * cols + j];
                       for (std::size_t j = 0; !gb.empty() && j < cb; ++j)
                         gb[i * cb + j] += g[i * cols + ca + j];
                     }
                   });
}

/// Columns [start, start + len) of a matrix.
template <class T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& a, std::size_t start, std::size_t len) {
  detail::require(a.rank() == 2 && start + len <= a.dim(1), "slice_cols: out of range");
  const auto rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rows * len);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a[i * cols + start + j];
  return tape.emit(Shape{rows, len}, std::move(out), {&a},
                   [a, rows, cols, start, len](std::span<const T> g) {
                     auto ga = grad_sink(a);
                     for (std::size_t i = 0; i < rows; ++i)
                       for (std::size_t j = 0; j < len; ++j)
                         ga[i * cols + start + j] += g[i * len + j];
                   });
}

/// Selects rows of a matrix: out[m] = a[idx[m]].
template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, std::vector<std::size_t> idx) {
  detail::require(a.rank() == 2, "gather_rows expects a matrix");
  const auto rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(idx.size() * cols);
  for (std::size_t m = 0; m < idx.size(); ++m) {
    detail::require(idx[m] < rows, "gather_rows: index " + std::to_string(idx[m]) +
                                       " out of range " + std::to_string(rows));
    std::copy_n(a.data().begin() + idx[m] * cols, cols, out.begin() + m * cols);
  }
  const auto n = idx.size();
  return tape.emit(Shape{n, cols}, std::move(out), {&a},
                   [a, cols, idx = std::move(idx)](std::span<const T> g) {
                     auto ga = grad_sink(a);
                     for (std::size_t m = 0; m < idx.size(); ++m)
                       for (std::size_t j = 0; j < cols; ++j)
                         ga[idx[m] * cols + j] += g[m * cols + j];
                   });
}

/// Picks individual matrix entries: out[k] = a[rc[k].first][rc[k].second].
template <class T>
Tensor<T> gather_elements(Tape<T>& tape, const Tensor<T>& a,
                          std::vector<std::pair<std::size_t, std::size_t>> rc) {
  detail::require(a.rank() == 2, "gather_elements expects a matrix");
  const auto rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rc.size());
  for (std::size_t k = 0; k < rc.size(); ++k) {
    detail::require(rc[k].first < rows && rc[k].second < cols, "gather_elements: out of range");
    out[k] = a[rc[k].first * cols + rc[k].second];
  }
  const auto n = rc.size();
  return tape.emit(Shape{n}, std::move(out), {&a},
                   [a, cols, rc = std::move(rc)](std::span<const T> g) {
                     auto ga = grad_sink(a);
                     for (std::size_t k = 0; k < rc.size(); ++k)
                       ga[rc[k].first * cols + rc[k].second] += g[k];
                   });
}

/// Copy that no longer participates in differentiation.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), a.values());
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(a) * op(b) for matrices, with optional transposition of either operand.
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
  const auto m = trans_a ? a.dim(1) : a.dim(0);
  const auto k = trans_a ? a.dim(0) : a.dim(1);
  const auto kb = trans_b ? b.dim(1) : b.dim(0);
  const auto n = trans_b ? b.dim(0) : b.dim(1);
  detail::require(k == kb, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " * " +
                               shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(trans_a, trans_b, m, n, k, a.data().data(), b.data().data(), out.data());
  return tape.emit(Shape{m, n}, std::move(out), {&a, &b},
                   [a, b, trans_a, trans_b, m, n, k](std::span<const T> g) {
                     if (auto ga = grad_sink(a); !ga.empty()) {
                       // dA = G * op(B)^T, stored as op'ed shape
                       if (!trans_a)
                         detail::gemm_acc(false, !trans_b, m, k, n, g.data(), b.data().data(),
                                          ga.data());
                       else  // A^T = X: dA = op(B) * G^T
                         detail::gemm_acc(trans_b, true, k, m, n, b.data().data(), g.data(),
                                          ga.data());
                     }
                     if (auto gb = grad_sink(b); !gb.empty()) {
                       if (!trans_b)  // dB = op(A)^T * G
                         detail::gemm_acc(!trans_a, false, k, n, m, a.data().data(), g.data(),
                                          gb.data());
                       else  // dB = G^T * op(A)
                         detail::gemm_acc(true, trans_a, n, k, m, g.data(), a.data().data(),
                                          gb.data());
                     }
                   });
}

/// x[M x N] + b[N] broadcast over rows.
template <class T>
Tensor<T> add_row_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && b.size() == x.dim(1), "add_row_bias: shape mismatch");
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[i * cols + j] + b[j];
  return tape.emit(x.shape(), std::move(out), {&x, &b}, [x, b, rows, cols](std::span<const T> g) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    if (auto gb = grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis` with max subtraction.
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw InvalidArgument("softmax: axis " + std::to_string(axis) + " out of range for rank " +
                          std::to_string(x.rank()));
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  return tape.emit(x.shape(), out, {&x},
                     [x, out, outer, len, inner](std::span<const T> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t in = 0; in < inner; ++in) {
                           const auto base = o * len * inner + in;
                           T dot = T(0);
                           for (std::size_t k = 0; k < len; ++k)
                             dot += g[base + k * inner] * out[base + k * inner];
                           for (std::size_t k = 0; k < len; ++k)
                             gx[base + k * inner] +=
                                 out[base + k * inner] * (g[base + k * inner] - dot);
                         }
                     });
}

/// log(softmax(x)) along `axis`.
template <class T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw InvalidArgument("log_softmax: axis out of range");
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) z += std::exp(x[base + k * inner] - mx);
      const T lz = mx + std::log(z);
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = x[base + k * inner] - lz;
    }
  return tape.emit(x.shape(), out, {&x}, [x, out, outer, len, inner](std::span<const T> g) {
    auto gx = grad_sink(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const auto base = o * len * inner + in;
        T gs = T(0);
        for (std::size_t k = 0; k < len; ++k) gs += g[base + k * inner];
        for (std::size_t k = 0; k < len; ++k)
          gx[base + k * inner] += g[base + k * inner] - std::exp(out[base + k * inner]) * gs;
      }
  });
}

/// Per-channel affine normalization of a [C x H x W] map with constant
/// statistics: gamma_c * (x - mean_c) * inv_std_c + beta_c.
template <class T>
Tensor<T> channel_normalize(Tape<T>& tape, const Tensor<T>& x, std::vector<T> mean,
                            std::vector<T> inv_std, const Tensor<T>& gamma,
                            const Tensor<T>& beta) {
  detail::require(x.rank() == 3, "channel_normalize expects [C x H x W]");
  const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
  detail::require(mean.size() == c && inv_std.size() == c && gamma.size() == c && beta.size() == c,
                  "channel_normalize: channel mismatch");
  std::vector<T> out(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T s = gamma[ch] * inv_std[ch];
    for (std::size_t p = 0; p < hw; ++p)
      out[ch * hw + p] = (x[ch * hw + p] - mean[ch]) * s + beta[ch];
  }
  return tape.emit(x.shape(), std::move(out), {&x, &gamma, &beta},
                   [x, gamma, beta, mean = std::move(mean), inv_std = std::move(inv_std), c,
                    hw](std::span<const T> g) {
                     auto gx = grad_sink(x);
                     auto gg = grad_sink(gamma);
                     auto gb = grad_sink(beta);
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const T s = gamma[ch] * inv_std[ch];
                       T acc_g = T(0), acc_b = T(0);
                       for (std::size_t p = 0; p < hw; ++p) {
                         const auto i = ch * hw + p;
                         if (!gx.empty()) gx[i] += g[i] * s;
                         acc_g += g[i] * (x[i] - mean[ch]) * inv_std[ch];
                         acc_b += g[i];
                       }
                       if (!gg.empty()) gg[ch] += acc_g;
                       if (!gb.empty()) gb[ch] += acc_b;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 2-D cross-correlation of a single [C_in x H x W] map with weights
/// [C_out x C_in x K x K] and bias [C_out].
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require(x.rank() == 3 && w.rank() == 4, "conv2d expects x [C x H x W], w [O x C x K x K]");
  const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto cout = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == cin, "conv2d: channel mismatch, input has " + std::to_string(cin) +
                                       ", kernel expects " + std::to_string(w.dim(1)));
  detail::require(w.dim(3) == k, "conv2d: kernel must be square");
  detail::require(b.size() == cout, "conv2d: bias length mismatch");
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(k <= h + 2 * padding && k <= wd + 2 * padding, "conv2d: kernel larger than input");
  const auto ho = (h + 2 * padding - k) / stride + 1;
  const auto wo = (wd + 2 * padding - k) / stride + 1;
  const auto rows = cin * k * k, npix = ho * wo;

  const bool pointwise = k == 1 && stride == 1 && padding == 0;
  std::vector<T> cols;
  if (!pointwise) {
    cols.assign(rows * npix, T(0));
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* dst = cols.data() + ((c * k + ky) * k + kx) * npix;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              dst[oy * wo + ox] = x[(c * h + iy) * wd + ix];
            }
          }
        }
  }
  const T* col_ptr = pointwise ? x.data().data() : cols.data();
  std::vector<T> out(cout * npix);
  for (std::size_t o = 0; o < cout; ++o) std::fill_n(out.begin() + o * npix, npix, b[o]);
  detail::gemm_acc(false, false, cout, npix, rows, w.data().data(), col_ptr, out.data());

  return tape.emit(
      Shape{cout, ho, wo}, std::move(out), {&x, &w, &b},
      [x, w, b, cols = std::move(cols), pointwise, cin, h, wd, cout, k, stride, padding, ho, wo,
       rows, npix](std::span<const T> g) {
        const T* cp = pointwise ? x.data().data() : cols.data();
        if (auto gw = grad_sink(w); !gw.empty())
          detail::gemm_acc(false, true, cout, rows, npix, g.data(), cp, gw.data());
        if (auto gb = grad_sink(b); !gb.empty())
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t p = 0; p < npix; ++p) gb[o] += g[o * npix + p];
        auto gx = grad_sink(x);
        if (gx.empty()) return;
        if (pointwise) {
          detail::gemm_acc(true, false, rows, npix, cout, w.data().data(), g.data(), gx.data());
          return;
        }
        std::vector<T> gcols(rows * npix, T(0));
        detail::gemm_acc(true, false, rows, npix, cout, w.data().data(), g.data(), gcols.data());
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T* src = gcols.data() + ((c * k + ky) * k + kx) * npix;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                  static_cast<std::ptrdiff_t>(padding);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  gx[(c * h + iy) * wd + ix] += src[oy * wo + ox];
                }
              }
            }
      });
}

/// Batched 1-D cross-correlation: input [M x C_in x L], kernel
/// [C_out x C_in x K], bias [C_out] -> [M x C_out x L'].
template <class T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require(x.rank() == 3 && w.rank() == 3, "conv1d expects x [M x C x L], w [O x C x K]");
  const auto m = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const auto cout = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == cin, "conv1d: channel mismatch, input has " + std::to_string(cin) +
                                       ", kernel expects " + std::to_string(w.dim(1)));
  detail::require(b.size() == cout, "conv1d: bias length mismatch");
  detail::require(stride >= 1, "conv1d: stride must be >= 1");
  detail::require(k >= 1 && k <= len + 2 * padding, "conv1d: kernel longer than padded input");
  const auto lo = (len + 2 * padding - k) / stride + 1;
  const auto rows = cin * k, ncols = m * lo;

  // cols[(c, kk)][(s, l)] = x[s][c][l * stride + kk - padding]
  std::vector<T> cols(rows * ncols, T(0));
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t kk = 0; kk < k; ++kk)
        for (std::size_t l = 0; l < lo; ++l) {
          const auto il = static_cast<std::ptrdiff_t>(l * stride + kk) -
                          static_cast<std::ptrdiff_t>(padding);
          if (il < 0 || il >= static_cast<std::ptrdiff_t>(len)) continue;
          cols[(c * k + kk) * ncols + s * lo + l] = x[(s * cin + c) * len + il];
        }
  std::vector<T> tmp(cout * ncols, T(0));
  detail::gemm_acc(false, false, cout, ncols, rows, w.data().data(), cols.data(), tmp.data());
  std::vector<T> out(m * cout * lo);
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t l = 0; l < lo; ++l)
        out[(s * cout + o) * lo + l] = tmp[o * ncols + s * lo + l] + b[o];

  return tape.emit(
      Shape{m, cout, lo}, std::move(out), {&x, &w, &b},
      [x, w, b, cols = std::move(cols), m, cin, len, cout, k, stride, padding, lo, rows,
       ncols](std::span<const T> g) {
        std::vector<T> gt(cout * ncols);
        for (std::size_t s = 0; s < m; ++s)
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t l = 0; l < lo; ++l)
              gt[o * ncols + s * lo + l] = g[(s * cout + o) * lo + l];
        if (auto gw = grad_sink(w); !gw.empty())
          detail::gemm_acc(false, true, cout, rows, ncols, gt.data(), cols.data(), gw.data());
        if (auto gb = grad_sink(b); !gb.empty())
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t j = 0; j < ncols; ++j) gb[o] += gt[o * ncols + j];
        auto gx = grad_sink(x);
        if (gx.empty()) return;
        std::vector<T> gcols(rows * ncols, T(0));
        detail::gemm_acc(true, false, rows, ncols, cout, w.data().data(), gt.data(), gcols.data());
        for (std::size_t s = 0; s < m; ++s)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t kk = 0; kk < k; ++kk)
              for (std::size_t l = 0; l < lo; ++l) {
                const auto il = static_cast<std::ptrdiff_t>(l * stride + kk) -
                                static_cast<std::ptrdiff_t>(padding);
                if (il < 0 || il >= static_cast<std::ptrdiff_t>(len)) continue;
                gx[(s * cin + c) * len + il] += gcols[(c * k + kk) * ncols + s * lo + l];
              }
      });
}

/// Non-overlapping window mean over a [C x H x W] map; H and W must be
/// multiples of `window`.
template <class T>
Tensor<T> avg_pool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t window) {
  detail::require(x.rank() == 3, "avg_pool2d expects [C x H x W]");
  const auto c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  detail::require(window >= 1 && h % window == 0 && wd % window == 0,
                  "avg_pool2d: window " + std::to_string(window) + " does not tile " +
                      shape_str(x.shape()));
  const auto ho = h / window, wo = wd / window;
  const T inv = T(1) / static_cast<T>(window * window);
  std::vector<T> out(c * ho * wo, T(0));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < wd; ++xx)
        out[(ch * ho + y / window) * wo + xx / window] += x[(ch * h + y) * wd + xx];
  for (auto& v : out) v *= inv;
  return tape.emit(Shape{c, ho, wo}, std::move(out), {&x},
                   [x, c, h, wd, ho, wo, window, inv](std::span<const T> g) {
                     auto gx = grad_sink(x);
                     for (std::size_t ch = 0; ch < c; ++ch)
                       for (std::size_t y = 0; y < h; ++y)
                         for (std::size_t xx = 0; xx < wd; ++xx)
                           gx[(ch * h + y) * wd + xx] +=
                               g[(ch * ho + y / window) * wo + xx / window] * inv;
                   });
}

}  // namespace sure::diff
