// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Every op computes its forward value
// eagerly and records a backward closure when an input requires a gradient.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gap/errors.hpp"
#include "gap/tensor.hpp"

namespace gap {

namespace kernels {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
             std::size_t k) {
  // Transposing b first keeps the inner loop a contiguous axpy.
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(a, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// Unfolds one [c x h x w] image into columns [(c*k*k) x (ho*wo)].
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w,
            std::size_t k, T* col) {
  const std::size_t ho = h - k + 1;
  const std::size_t wo = w - k + 1;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          const T* src = img + (ch * h + y + ky) * w + kx;
          for (std::size_t x = 0; x < wo; ++x) dst[y * wo + x] = src[x];
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w,
                std::size_t k, T* img) {
  const std::size_t ho = h - k + 1;
  const std::size_t wo = w - k + 1;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          T* dst = img + (ch * h + y + ky) * w + kx;
          for (std::size_t x = 0; x < wo; ++x) dst[x] += src[y * wo + x];
        }
      }
    }
  }
}

}  // namespace kernels

namespace detail {

// When set, relu appends the sign of every input it sees. Gradient checks use
// it to tell whether a finite-difference window straddles a kink.
inline thread_local std::vector<bool>* relu_sign_log = nullptr;

template <typename T>
std::vector<T> copy_values(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + to_string(s));
  }
}

/// Number of times `b` repeats inside `a` when `b` is a trailing-suffix
/// broadcast of `a` (or a single element).
inline std::size_t suffix_repeats(const Shape& a, const Shape& b, const char* op) {
  const std::size_t nb = numel(b);
  if (nb == 1) return numel(a);
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    ok = a[a.size() - b.size() + i] == b[i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) +
                         " onto " + to_string(a));
  }
  return numel(a) / nb;
}

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T{0});
  kernels::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>({m, n}, std::move(out), {pa, pb},
                                [pa, pb, m, k, n](detail::Node<T>& self) {
    if (pa->requires_grad) {
      kernels::gemm_nt(self.grad.data(), pb->data->data(), pa->ensure_grad().data(),
                       m, n, k);
    }
    if (pb->requires_grad) {
      kernels::gemm_tn(pa->data->data(), self.grad.data(), pb->ensure_grad().data(),
                       m, k, n);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  auto pa = a.node();
  return detail::make_result<T>({n, m}, std::move(out), {pa},
                                [pa, m, n](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  auto pa = a.node();
  return detail::make_result<T>(std::move(shape), detail::copy_values(a), {pa},
                                [pa](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b is either a's shape, a trailing suffix of it, or a scalar.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = detail::suffix_repeats(a.shape(), b.shape(), "add");
  const std::size_t nb = b.numel();
  std::vector<T> out = detail::copy_values(a);
  auto bv = b.values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] += bv[j];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa, pb},
                                [pa, pb, reps, nb](detail::Node<T>& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) g[j] += self.grad[r * nb + j];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = detail::suffix_repeats(a.shape(), b.shape(), "sub");
  const std::size_t nb = b.numel();
  std::vector<T> out = detail::copy_values(a);
  auto bv = b.values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] -= bv[j];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa, pb},
                                [pa, pb, reps, nb](detail::Node<T>& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) g[j] -= self.grad[r * nb + j];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = detail::suffix_repeats(a.shape(), b.shape(), "mul");
  const std::size_t nb = b.numel();
  std::vector<T> out = detail::copy_values(a);
  auto bv = b.values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] *= bv[j];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa, pb},
                                [pa, pb, reps, nb](detail::Node<T>& self) {
    const auto& av = *pa->data;
    const auto& bv = *pb->data;
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) g[r * nb + j] += self.grad[r * nb + j] * bv[j];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) g[j] += self.grad[r * nb + j] * av[r * nb + j];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = detail::suffix_repeats(a.shape(), b.shape(), "div");
  const std::size_t nb = b.numel();
  std::vector<T> out = detail::copy_values(a);
  auto bv = b.values();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < nb; ++j) out[r * nb + j] /= bv[j];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa, pb},
                                [pa, pb, reps, nb](detail::Node<T>& self) {
    const auto& av = *pa->data;
    const auto& bv = *pb->data;
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j) g[r * nb + j] += self.grad[r * nb + j] / bv[j];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < nb; ++j)
          g[j] -= self.grad[r * nb + j] * av[r * nb + j] / (bv[j] * bv[j]);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out = detail::copy_values(a);
  for (auto& x : out) x *= s;
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa, s](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out = detail::copy_values(a);
  for (auto& x : out) x += s;
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out = detail::copy_values(a);
  if (detail::relu_sign_log)
    for (T x : out) detail::relu_sign_log->push_back(x > T{0});
  for (auto& x : out) x = x > T{0} ? x : T{0};
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    const auto& x = *pa->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T{0}) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> out = detail::copy_values(a);
  for (auto& x : out) {
    if (x < T{0}) throw NumericError("sqrt: negative input");
    x = std::sqrt(x);
  }
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    const auto& y = *self.data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (T{2} * y[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions and structure

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (T x : a.values()) acc += x;
  auto pa = a.node();
  return detail::make_result<T>({1}, {acc}, {pa}, [pa](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

/// Mean over one axis; the axis is removed from the shape (a rank-1 input
/// reduces to shape [1]).
template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw DimensionError("mean_over_axis: axis " + std::to_string(axis) +
                         " out of range for " + to_string(a.shape()));
  }
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<T> out(outer * inner, T{0});
  auto v = a.values();
  const T inv = T{1} / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += v[(o * len + l) * inner + i];
  for (auto& x : out) x *= inv;
  auto pa = a.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {pa},
                                [pa, outer, inner, len, inv](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i)
          g[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         to_string(s0));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(s) + " incompatible with " +
                           to_string(s0));
    }
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::size_t offset = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * lens[k] * inner, lens[k] * inner,
                  out.begin() + (o * total + offset) * inner);
    offset += lens[k];
    nodes.push_back(parts[k].node());
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), nodes,
                                [nodes, lens, outer, inner, total](detail::Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        auto& g = nodes[k]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < lens[k] * inner; ++i)
            g[o * lens[k] * inner + i] += self.grad[(o * total + off) * inner + i];
      }
      off += lens[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Neural-network ops

/// Softmax over the last axis, computed with max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  detail::check_finite(a.values(), "softmax_lastdim");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<T> out = detail::copy_values(a);
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa, rows, n](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    const auto& y = *self.data;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
    }
  });
}

/// Valid (unpadded) cross-correlation. `input` is [c x h x w] or a batch
/// [n x c x h x w]; `kernels` is [c_out x c_in x k x k]; `bias` is [c_out].
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& input, const Tensor<T>& weights,
                       const Tensor<T>& bias) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3) {
    throw DimensionError("conv2d_valid: input must be [c,h,w] or [n,c,h,w], got " +
                         to_string(input.shape()));
  }
  detail::require_rank(weights.shape(), 4, "conv2d_valid");
  const std::size_t n = batched ? input.dim(0) : 1;
  const std::size_t c = input.shape()[batched ? 1 : 0];
  const std::size_t h = input.shape()[batched ? 2 : 1];
  const std::size_t w = input.shape()[batched ? 3 : 2];
  const std::size_t co = weights.dim(0), k = weights.dim(2);
  if (weights.dim(1) != c || weights.dim(3) != k || bias.numel() != co) {
    throw DimensionError("conv2d_valid: kernels " + to_string(weights.shape()) +
                         " / bias " + to_string(bias.shape()) + " do not fit input " +
                         to_string(input.shape()));
  }
  if (k > h || k > w) {
    throw DimensionError("conv2d_valid: kernel " + to_string(weights.shape()) +
                         " larger than input " + to_string(input.shape()));
  }
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  const std::size_t ckk = c * k * k, hw = ho * wo;
  std::vector<T> out(n * co * hw);
  std::vector<T> col(ckk * hw);
  const T* wv = weights.values().data();
  const T* bv = bias.values().data();
  for (std::size_t b = 0; b < n; ++b) {
    kernels::im2col(input.values().data() + b * c * h * w, c, h, w, k, col.data());
    T* ob = out.data() + b * co * hw;
    for (std::size_t o = 0; o < co; ++o) std::fill_n(ob + o * hw, hw, bv[o]);
    kernels::gemm_nn(wv, col.data(), ob, co, ckk, hw);
  }
  Shape out_shape = batched ? Shape{n, co, ho, wo} : Shape{co, ho, wo};
  auto pi = input.node(), pw = weights.node(), pb = bias.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {pi, pw, pb},
      [pi, pw, pb, n, c, h, w, co, k, ckk, hw](detail::Node<T>& self) {
        std::vector<T> col(ckk * hw), dcol;
        if (pi->requires_grad) dcol.resize(ckk * hw);
        for (std::size_t b = 0; b < n; ++b) {
          const T* gb = self.grad.data() + b * co * hw;
          if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t o = 0; o < co; ++o)
              for (std::size_t i = 0; i < hw; ++i) g[o] += gb[o * hw + i];
          }
          if (pw->requires_grad) {
            kernels::im2col(pi->data->data() + b * c * h * w, c, h, w, k, col.data());
            kernels::gemm_nt(gb, col.data(), pw->ensure_grad().data(), co, hw, ckk);
          }
          if (pi->requires_grad) {
            std::fill(dcol.begin(), dcol.end(), T{0});
            kernels::gemm_tn(pw->data->data(), gb, dcol.data(), co, ckk, hw);
            kernels::col2im_add(dcol.data(), c, h, w, k,
                                pi->ensure_grad().data() + b * c * h * w);
          }
        }
      });
}

/// Inverted dropout: identity when not training or p == 0, otherwise zeroes
/// entries with probability p and scales survivors by 1/(1-p).
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? factor : T{0};
  std::vector<T> out = detail::copy_values(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {pa},
                                [pa, mask = std::move(mask)](detail::Node<T>& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// Layer normalization over the last axis with elementwise gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t n = a.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) +
                         " entries");
  }
  const std::size_t rows = a.numel() / n;
  std::vector<T> xhat(a.numel()), inv_std(rows), out(a.numel());
  auto v = a.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += v[r * n + j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T d = v[r * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (v[r * n + j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  auto pa = a.node(), pg = gain.node(), pb = bias.node();
  return detail::make_result<T>(
      a.shape(), std::move(out), {pa, pg, pb},
      [pa, pg, pb, rows, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node<T>& self) {
        const auto& gv = *pg->data;
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->ensure_grad();
          auto& gb = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += self.grad[r * n + j] * xhat[r * n + j];
              gb[j] += self.grad[r * n + j];
            }
        }
        if (pa->requires_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[r * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[r * n + j];
            }
            mean_d /= static_cast<T>(n);
            mean_dx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = self.grad[r * n + j] * gv[j];
              g[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
            }
          }
        }
      });
}

/// Mean binary cross-entropy of `logits` against 0/1 `labels`, in the stable
/// form max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const int> labels) {
  if (labels.size() != logits.numel()) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(logits.numel()) + " logits");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw InputError("bce_with_logits: label must be 0 or 1");
  }
  detail::check_finite(logits.values(), "bce_with_logits");
  const std::size_t n = labels.size();
  auto z = logits.values();
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T zi = z[i];
    total += std::max(zi, T{0}) - zi * static_cast<T>(labels[i]) +
             std::log1p(std::exp(-std::abs(zi)));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  auto pl = logits.node();
  return detail::make_result<T>({1}, {total / static_cast<T>(n)}, {pl},
                                [pl, ys = std::move(ys)](detail::Node<T>& self) {
    auto& g = pl->ensure_grad();
    const auto& zv = *pl->data;
    const T scale = self.grad[0] / static_cast<T>(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-zv[i]));
      g[i] += scale * (s - static_cast<T>(ys[i]));
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, int label) {
  const int labels[1] = {label};
  return bce_with_logits(logits, std::span<const int>(labels));
}

/// y = x W + b for x [rows x in], W [in x out], b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

}  // namespace gap
