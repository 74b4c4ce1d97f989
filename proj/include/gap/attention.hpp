// SPDX-License-Identifier: Apache-2.0
//
// Sequence ops over a batch of B sequences of T tokens stored as [B*T x D].
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gap/errors.hpp"
#include "gap/ops.hpp"
#include "gap/tensor.hpp"

namespace gap {

namespace detail {

inline void check_sequence(const Shape& s, std::size_t batch, std::size_t tokens, const char* op) {
  if (s.size() != 2 || batch == 0 || tokens == 0 || s[0] != batch * tokens) {
    throw DimensionError(std::string(op) + ": expected [" + std::to_string(batch * tokens) +
                         " x D], got " + to_string(s));
  }
}

/// Row-softmaxed scores of one (sequence, head) block: A = softmax(Q K^T / sqrt(d)).
template <typename T>
void attention_block(const T* q, const T* k, std::size_t stride, std::size_t tokens, std::size_t d,
                     T* a) {
  const T inv = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t i = 0; i < tokens; ++i) {
    T* row = a + i * tokens;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < tokens; ++j) {
      T acc{0};
      for (std::size_t c = 0; c < d; ++c) acc += q[i * stride + c] * k[j * stride + c];
      row[j] = acc * inv;
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("attention: non-finite scores");
    T total{0};
    for (std::size_t j = 0; j < tokens; ++j) total += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < tokens; ++j) row[j] /= total;
  }
}

}  // namespace detail

/// Attention probabilities for every (sequence, head): result[b][h] is a
/// row-major T x T matrix.
template <typename T>
std::vector<std::vector<std::vector<T>>> attention_weights(const Tensor<T>& q, const Tensor<T>& k,
                                                           std::size_t batch, std::size_t tokens,
                                                           std::size_t heads) {
  detail::check_sequence(q.shape(), batch, tokens, "attention_weights");
  if (k.shape() != q.shape() || q.dim(1) % heads != 0) {
    throw DimensionError("attention_weights: incompatible query/key shapes");
  }
  const std::size_t D = q.dim(1), d = D / heads;
  std::vector<std::vector<std::vector<T>>> out(batch, std::vector<std::vector<T>>(heads));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      out[b][h].resize(tokens * tokens);
      detail::attention_block(q.values().data() + b * tokens * D + h * d,
                              k.values().data() + b * tokens * D + h * d, D, tokens, d,
                              out[b][h].data());
    }
  return out;
}

/// Multi-head scaled dot-product attention. q, k, v are [B*T x H*d]; head h
/// owns columns [h*d, (h+1)*d). Output row t of head h is sum_j A_tj v_j.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              std::size_t batch, std::size_t tokens, std::size_t heads) {
  detail::check_sequence(q.shape(), batch, tokens, "multihead_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("multihead_attention: q " + to_string(q.shape()) + ", k " +
                         to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  const std::size_t D = q.dim(1);
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("multihead_attention: width " + std::to_string(D) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t d = D / heads, TT = tokens * tokens;
  std::vector<T> probs(batch * heads * TT);
  std::vector<T> out(batch * tokens * D, T{0});
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = b * tokens * D + h * d;
      T* a = probs.data() + (b * heads + h) * TT;
      detail::attention_block(qv + base, kv + base, D, tokens, d, a);
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < tokens; ++j) {
          const T w = a[i * tokens + j];
          for (std::size_t c = 0; c < d; ++c) out[base + i * D + c] += w * vv[base + j * D + c];
        }
    }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return detail::make_result<T>(
      q.shape(), std::move(out), {pq, pk, pv},
      [pq, pk, pv, probs = std::move(probs), batch, tokens, heads, D, d, TT](detail::Node<T>& self) {
        const T inv = T(1) / std::sqrt(static_cast<T>(d));
        const T* g = self.grad.data();
        const T* qv = pq->data->data();
        const T* kv = pk->data->data();
        const T* vv = pv->data->data();
        T* gq = pq->requires_grad ? pq->ensure_grad().data() : nullptr;
        T* gk = pk->requires_grad ? pk->ensure_grad().data() : nullptr;
        T* gv = pv->requires_grad ? pv->ensure_grad().data() : nullptr;
        std::vector<T> ds(TT);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = b * tokens * D + h * d;
            const T* a = probs.data() + (b * heads + h) * TT;
            for (std::size_t i = 0; i < tokens; ++i) {
              // dA_ij = g_i . v_j, then the softmax Jacobian.
              T dot{0};
              for (std::size_t j = 0; j < tokens; ++j) {
                T acc{0};
                for (std::size_t c = 0; c < d; ++c) acc += g[base + i * D + c] * vv[base + j * D + c];
                ds[i * tokens + j] = acc;
                dot += acc * a[i * tokens + j];
              }
              for (std::size_t j = 0; j < tokens; ++j)
                ds[i * tokens + j] = a[i * tokens + j] * (ds[i * tokens + j] - dot) * inv;
            }
            for (std::size_t i = 0; i < tokens; ++i)
              for (std::size_t j = 0; j < tokens; ++j) {
                const T w = a[i * tokens + j], s = ds[i * tokens + j];
                for (std::size_t c = 0; c < d; ++c) {
                  if (gv) gv[base + j * D + c] += w * g[base + i * D + c];
                  if (gq) gq[base + i * D + c] += s * kv[base + j * D + c];
                  if (gk) gk[base + j * D + c] += s * qv[base + i * D + c];
                }
              }
          }
      });
}

/// Temporal context normalization: within each sequence, every feature is
/// shifted to zero mean and divided by (std + eps) over the T tokens.
template <typename T>
Tensor<T> temporal_context_norm(const Tensor<T>& x, std::size_t batch, std::size_t tokens,
                                T eps = T(1e-5)) {
  detail::check_sequence(x.shape(), batch, tokens, "temporal_context_norm");
  if (tokens < 2) throw ConfigError("temporal_context_norm: needs T >= 2, got T=1");
  const std::size_t D = x.dim(1);
  std::vector<T> out(x.numel()), sigma(batch * D);
  const T* xv = x.values().data();
  const T n = static_cast<T>(tokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < D; ++f) {
      T mean{0};
      for (std::size_t t = 0; t < tokens; ++t) mean += xv[(b * tokens + t) * D + f];
      mean /= n;
      T var{0};
      for (std::size_t t = 0; t < tokens; ++t) {
        const T c = xv[(b * tokens + t) * D + f] - mean;
        out[(b * tokens + t) * D + f] = c;
        var += c * c;
      }
      const T sd = std::sqrt(var / n);
      sigma[b * D + f] = sd;
      for (std::size_t t = 0; t < tokens; ++t) out[(b * tokens + t) * D + f] /= sd + eps;
    }
  auto px = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {px},
      [px, sigma = std::move(sigma), batch, tokens, D, eps, n](detail::Node<T>& self) {
        auto& gx = px->ensure_grad();
        const T* g = self.grad.data();
        const T* y = self.data->data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t f = 0; f < D; ++f) {
            const T sd = sigma[b * D + f], s = sd + eps;
            // y = c / s with c centred; dsigma/dc_t = c_t / (n sigma).
            T gy{0}, gmean{0};
            for (std::size_t t = 0; t < tokens; ++t) {
              const std::size_t i = (b * tokens + t) * D + f;
              gy += g[i] * y[i];
              gmean += g[i];
            }
            gmean /= n;
            const T coef = sd > T(0) ? gy / (n * sd * s) : T(0);
            for (std::size_t t = 0; t < tokens; ++t) {
              const std::size_t i = (b * tokens + t) * D + f;
              const T c = y[i] * s;
              gx[i] += (g[i] - gmean) / s - coef * c;
            }
          }
      });
}

/// Mean over the T tokens of each sequence: [B*T x D] -> [B x D].
template <typename T>
Tensor<T> mean_over_tokens(const Tensor<T>& x, std::size_t batch, std::size_t tokens) {
  detail::check_sequence(x.shape(), batch, tokens, "mean_over_tokens");
  return mean_over_axis(reshape(x, {batch, tokens, x.dim(1)}), 1);
}

}  // namespace gap
