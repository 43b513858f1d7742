// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ehrbert/autodiff/tape.hpp"
#include "ehrbert/core/error.hpp"
#include "ehrbert/core/random.hpp"

// Differentiable operators over 2-D row-major tensors. A rank-1 input of
// size n is read as a 1 x n row; outputs are always rank 2.

namespace ehrbert::ad {

namespace detail {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * n + j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = A[i * k + p];
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

template <typename T>
Shape mat(std::size_t r, std::size_t c) {
  return Shape{r, c};
}

}  // namespace detail

/// A[m,k] * B[k,n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul");
  const auto &A = a.value(), &B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) throw ShapeError("matmul", A.shape(), B.shape());
  Tensor<T> C({m, n});
  detail::gemm_nn(A.data(), B.data(), C.data(), m, k, n);
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(
      std::move(C), {ia, ib},
      [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        const T* dC = t.grad(self).data();
        if (t.requires_grad(ia)) detail::gemm_nt(dC, t.value(ib).data(), t.grad(ia).data(), m, n, k);
        if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia).data(), dC, t.grad(ib).data(), m, k, n);
      },
      "matmul");
}

/// A[m,k] * B[n,k]^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul_nt");
  const auto &A = a.value(), &B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k) throw ShapeError("matmul_nt", A.shape(), B.shape());
  Tensor<T> C({m, n});
  detail::gemm_nt(A.data(), B.data(), C.data(), m, k, n);
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(
      std::move(C), {ia, ib},
      [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        const T* dC = t.grad(self).data();
        if (t.requires_grad(ia)) detail::gemm_nn(dC, t.value(ib).data(), t.grad(ia).data(), m, n, k);
        if (t.requires_grad(ib)) detail::gemm_tn(dC, t.value(ia).data(), t.grad(ib).data(), m, n, k);
      },
      "matmul_nt");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, m, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      },
      "transpose");
}

namespace detail {

enum class Binary { add, sub, mul };

// Elementwise binary op; `b` may also be a single row broadcast over a's rows.
template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary kind, const char* name) {
  same_tape(a, b, name);
  const auto &A = a.value(), &B = b.value();
  const std::size_t m = A.rows(), n = A.cols();
  const bool same = B.rows() == m && B.cols() == n;
  const bool row_bcast = !same && B.rows() == 1 && B.cols() == n;
  if (!same && !row_bcast) throw ShapeError(name, A.shape(), B.shape());
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T x = A[i * n + j], y = B[same ? i * n + j : j];
      out[i * n + j] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
    }
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib, m, n, same, kind](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
          auto& ga = t.grad(ia);
          if (kind == Binary::mul) {
            const auto& B = t.value(ib);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * B[same ? i * n + j : j];
          } else {
            for (std::size_t e = 0; e < m * n; ++e) ga[e] += g[e];
          }
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad(ib);
          const auto& A = t.value(ia);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t e = i * n + j;
              const T d = kind == Binary::add ? g[e] : kind == Binary::sub ? -g[e] : g[e] * A[e];
              gb[same ? e : j] += d;
            }
        }
      },
      name);
}

template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df, const char* name) {
  const auto& A = a.value();
  Tensor<T> out(detail::mat<T>(A.rows(), A.cols()));
  for (std::size_t e = 0; e < A.size(); ++e) out[e] = f(A[e]);
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, df](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = t.value(ia);
        const auto& y = t.value(self);
        auto& ga = t.grad(ia);
        for (std::size_t e = 0; e < g.size(); ++e) ga[e] += g[e] * df(x[e], y[e]);
      },
      name);
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(a, b, detail::Binary::add, "add");
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(a, b, detail::Binary::sub, "sub");
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(a, b, detail::Binary::mul, "mul");
}
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return mul(a, b);
}

/// scale * a + shift
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift = T(0)) {
  return detail::unary(
      a, [scale, shift](T x) { return scale * x + shift; }, [scale](T, T) { return scale; }, "affine");
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  return affine(a, T(-1), T(1));
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a,
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); }, "relu");
}

/// tanh approximation of GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T th = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
      },
      "gelu");
}

/// Softmax along `axis` (1 = within each row, 0 = within each column),
/// shifted by the max for stability.
template <typename T>
Var<T> softmax(Var<T> a, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const auto& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  // Iterate over "lines": rows for axis 1, columns for axis 0.
  const std::size_t lines = axis == 1 ? m : n, len = axis == 1 ? n : m;
  const std::size_t line_stride = axis == 1 ? n : 1, elem_stride = axis == 1 ? 1 : n;
  Tensor<T> out({m, n});
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    T mx = A[base];
    for (std::size_t e = 1; e < len; ++e) mx = std::max(mx, A[base + e * elem_stride]);
    T sum = T(0);
    for (std::size_t e = 0; e < len; ++e) {
      const T v = std::exp(A[base + e * elem_stride] - mx);
      out[base + e * elem_stride] = v;
      sum += v;
    }
    for (std::size_t e = 0; e < len; ++e) out[base + e * elem_stride] /= sum;
  }
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& ga = t.grad(ia);
        for (std::size_t l = 0; l < lines; ++l) {
          const std::size_t base = l * line_stride;
          T dot = T(0);
          for (std::size_t e = 0; e < len; ++e) dot += g[base + e * elem_stride] * y[base + e * elem_stride];
          for (std::size_t e = 0; e < len; ++e) {
            const std::size_t i = base + e * elem_stride;
            ga[i] += y[i] * (g[i] - dot);
          }
        }
      },
      "softmax");
}

/// Row-wise layer normalisation with affine gain and bias of size cols.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  detail::same_tape(x, gain, "layer_norm");
  detail::same_tape(x, bias, "layer_norm");
  const auto& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (gain.size() != n) throw ShapeError("layer_norm(gain)", X.shape(), gain.shape());
  if (bias.size() != n) throw ShapeError("layer_norm(bias)", X.shape(), bias.shape());
  const auto &G = gain.value(), &B = bias.value();
  std::vector<T> xhat(m * n), inv_std(m);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += X[i * n + j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = X[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (X[i * n + j] - mean) * inv_std[i];
      xhat[i * n + j] = h;
      out[i * n + j] = G[j] * h + B[j];
    }
  }
  const std::size_t ix = x.index(), ig = gain.index(), ib = bias.index();
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& G = t.value(ig);
        if (t.requires_grad(ig)) {
          auto& gg = t.grad(ig);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad(ix);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * G[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * G[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

/// Inverted dropout. Identity (no new node) when !train or rate == 0.
template <typename T>
Var<T> dropout(Var<T> a, double rate, bool train, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  const auto& A = a.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(A.size());
  Tensor<T> out(detail::mat<T>(A.rows(), A.cols()));
  for (std::size_t e = 0; e < A.size(); ++e) {
    mask[e] = rng.uniform() < rate ? T(0) : keep_scale;
    out[e] = A[e] * mask[e];
  }
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t e = 0; e < g.size(); ++e) ga[e] += g[e] * mask[e];
      },
      "dropout");
}

namespace detail {

template <typename T>
Var<T> reduce_axis(Var<T> a, int axis, bool average, const char* name) {
  if (axis != 0 && axis != 1) throw ShapeError(std::string(name) + ": axis must be 0 or 1");
  const auto& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor<T> out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  const T scale = average ? T(1) / static_cast<T>(axis == 0 ? m : n) : T(1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += A[i * n + j];
  for (auto& v : out.values()) v *= scale;
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, m, n, axis, scale](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += scale * g[axis == 0 ? j : i];
      },
      name);
}

}  // namespace detail

/// Sum over all entries -> [1,1].
template <typename T>
Var<T> sum(Var<T> a) {
  const auto& A = a.value();
  T s = T(0);
  for (T v : A.values()) s += v;
  Tensor<T> out({1, 1}, s);
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        for (auto& x : t.grad(ia)) x += g;
      },
      "sum");
}

/// Sum along axis: 0 -> [1,n], 1 -> [m,1].
template <typename T>
Var<T> sum(Var<T> a, int axis) {
  return detail::reduce_axis(a, axis, false, "sum");
}

/// Mean along axis: 0 -> [1,n], 1 -> [m,1].
template <typename T>
Var<T> mean(Var<T> a, int axis) {
  return detail::reduce_axis(a, axis, true, "mean");
}

/// Mean of the first `count` rows -> [1,n]. Rows past `count` (padding)
/// receive no gradient.
template <typename T>
Var<T> mean_rows(Var<T> a, std::size_t count) {
  const auto& A = a.value();
  const std::size_t n = A.cols();
  if (count == 0 || count > A.rows())
    throw ContractError("mean_rows: count " + std::to_string(count) + " not in [1, " + std::to_string(A.rows()) + "]");
  Tensor<T> out({1, n});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += A[i * n + j];
  const T scale = T(1) / static_cast<T>(count);
  for (auto& v : out.values()) v *= scale;
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, count, n, scale](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < count; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += scale * g[j];
      },
      "mean_rows");
}

/// Rows of `table` at `ids` -> [ids.size(), cols]. Out-of-range ids raise
/// `Err` (RangeError by default).
template <typename T, typename Err = RangeError>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids) {
  const auto& W = table.value();
  const std::size_t rows = W.rows(), n = W.cols();
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), n});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= rows)
      throw Err("row index " + std::to_string(idx[r]) + " out of range for table with " + std::to_string(rows) +
                " rows");
    std::copy_n(W.data() + static_cast<std::size_t>(idx[r]) * n, n, out.data() + r * n);
  }
  const std::size_t it = table.index();
  return table.tape().record(
      std::move(out), {it},
      [it, n, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gw = t.grad(it);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          T* dst = gw.data() + static_cast<std::size_t>(idx[r]) * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += g[r * n + j];
        }
      },
      "gather_rows");
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids) {
  return gather_rows<T, VocabRangeError>(table, ids);
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  const auto& A = a.value();
  const std::size_t n = A.cols();
  if (count == 0 || start + count > A.rows())
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                     shape_string(A.shape()));
  Tensor<T> out({count, n});
  std::copy_n(A.data() + start * n, count * n, out.data());
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, start, count, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t e = 0; e < count * n; ++e) ga[start * n + e] += g[e];
      },
      "slice_rows");
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t width) {
  const auto& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (width == 0 || start + width > n)
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(width) + ") outside " +
                     shape_string(A.shape()));
  Tensor<T> out({m, width});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.data() + i * n + start, width, out.data() + i * width);
  const std::size_t ia = a.index();
  return a.tape().record(
      std::move(out), {ia},
      [ia, start, width, m, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < width; ++j) ga[i * n + start + j] += g[i * width + j];
      },
      "slice_cols");
}

/// Side-by-side concatenation of matrices with equal row counts.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.cols());
    ids.push_back(p.index());
    total += p.cols();
  }
  Tensor<T> out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  Tape<T>& tape = parts[0].tape();
  auto fn = [ids, widths, m, total](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& gp = t.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  };
  return tape.record(std::move(out), std::span<const std::size_t>(ids), std::move(fn), "concat_cols");
}

/// Stacks matrices with equal column counts.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> heights, ids;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    heights.push_back(p.rows());
    ids.push_back(p.index());
    total += p.rows();
  }
  Tensor<T> out({total, n});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy_n(parts[k].value().data(), heights[k] * n, out.data() + off * n);
    off += heights[k];
  }
  Tape<T>& tape = parts[0].tape();
  return tape.record(
      std::move(out), std::span<const std::size_t>(ids),
      [ids, heights, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            auto& gp = t.grad(ids[k]);
            for (std::size_t e = 0; e < heights[k] * n; ++e) gp[e] += g[off * n + e];
          }
          off += heights[k];
        }
      },
      "concat_rows");
}

/// Mean cross-entropy of row-wise softmax(logits) against integer targets,
/// via log-sum-exp. Returns [1,1].
template <typename T>
Var<T> cross_entropy_logits(Var<T> logits, std::span<const std::int32_t> targets) {
  const auto& L = logits.value();
  const std::size_t m = L.rows(), n = L.cols();
  if (targets.size() != m)
    throw ShapeError("cross_entropy_logits", L.shape(), Shape{targets.size()});
  std::vector<T> probs(m * n);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T loss = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= n)
      throw RangeError("cross_entropy_logits: target " + std::to_string(tgt[i]) + " out of range");
    T mx = L[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, L[i * n + j]);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(L[i * n + j] - mx);
      s += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
    loss += std::log(s) + mx - L[i * n + static_cast<std::size_t>(tgt[i])];
  }
  loss /= static_cast<T>(m);
  const std::size_t il = logits.index();
  return logits.tape().record(
      Tensor<T>({1, 1}, loss), {il},
      [il, m, n, probs = std::move(probs), tgt = std::move(tgt)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(m);
        auto& gl = t.grad(il);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T onehot = static_cast<std::size_t>(tgt[i]) == j ? T(1) : T(0);
            gl[i * n + j] += g * (probs[i * n + j] - onehot);
          }
      },
      "cross_entropy_logits");
}

/// Mean binary cross-entropy of sigmoid(logit) against labels in {0,1},
/// in the stable form max(z,0) - z*y + log1p(exp(-|z|)). Returns [1,1].
template <typename T>
Var<T> binary_cross_entropy_logit(Var<T> logits, std::span<const T> labels) {
  const auto& Z = logits.value();
  if (labels.size() != Z.size()) throw ShapeError("binary_cross_entropy_logit", Z.shape(), Shape{labels.size()});
  std::vector<T> y(labels.begin(), labels.end());
  T loss = T(0);
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const T z = Z[i];
    loss += std::max(z, T(0)) - z * y[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const std::size_t count = Z.size();
  loss /= static_cast<T>(count);
  const std::size_t iz = logits.index();
  return logits.tape().record(
      Tensor<T>({1, 1}, loss), {iz},
      [iz, count, y = std::move(y)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(count);
        const auto& Z = t.value(iz);
        auto& gz = t.grad(iz);
        for (std::size_t i = 0; i < count; ++i) {
          const T z = Z[i];
          const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
          gz[i] += g * (s - y[i]);
        }
      },
      "binary_cross_entropy_logit");
}

template <typename T>
Var<T> binary_cross_entropy_logit(Var<T> logit, bool label) {
  const T y = label ? T(1) : T(0);
  return binary_cross_entropy_logit(logit, std::span<const T>(&y, 1));
}

}  // namespace ehrbert::ad
