// Token-centered local temporal multi-head self-attention.
//
// Attention runs only along T, independently at every (b, h, w) location.
// Token t attends to the tokens s with |t - s| <= (k - 1) / 2 that exist in
// the sequence; windows are truncated at the ends, never padded. Only the
// in-window keys are gathered, so cost is linear in T.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ca3d/ops.hpp"

namespace ca3d {

struct AttentionConfig {
  std::size_t channels = 64;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  std::size_t window = 3;
  std::size_t max_t = 16;

  std::size_t radius() const { return (window - 1) / 2; }

  void validate() const {
    if (channels == 0 || heads == 0 || head_dim == 0 || max_t == 0) {
      throw std::invalid_argument("attention: sizes must be positive");
    }
    if (heads * head_dim != channels) {
      throw std::invalid_argument("attention: heads (" + std::to_string(heads) + ") x head_dim (" +
                                  std::to_string(head_dim) + ") != channels (" + std::to_string(channels) + ")");
    }
    if (window == 0 || window % 2 == 0) {
      throw std::invalid_argument("attention: window must be odd and positive, got " + std::to_string(window));
    }
  }
};

/// mask[t * T + s] is true iff |t - s| <= (k - 1) / 2.
inline std::vector<bool> build_window_mask(std::size_t t_len, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw std::invalid_argument("build_window_mask: window must be odd and positive");
  const std::size_t r = (k - 1) / 2;
  std::vector<bool> mask(t_len * t_len);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t s = 0; s < t_len; ++s) mask[t * t_len + s] = (t > s ? t - s : s - t) <= r;
  return mask;
}

/// Number of (query, key) pairs inside the band; affine in T once T > radius.
inline std::uint64_t window_pair_count(std::size_t t_len, std::size_t k) {
  const std::size_t r = (k - 1) / 2;
  std::uint64_t pairs = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    const std::size_t lo = t >= r ? t - r : 0;
    const std::size_t hi = std::min(t_len - 1, t + r);
    pairs += hi - lo + 1;
  }
  return pairs;
}

/// x[b,c,t,h,w] + pos[t,c], broadcast over batch and space.
template <class T>
Var<T> add_positional_embedding(const Var<T>& x, const Var<T>& pos) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 5, "add_positional_embedding: expected (B,C,T,H,W)");
  detail::require(pos.shape().size() == 2 && pos.shape()[1] == xs[1],
                  "add_positional_embedding: embedding must be (max_T, C)");
  const std::size_t batch = xs[0], channels = xs[1], t_len = xs[2], hw = xs[3] * xs[4];
  detail::require(t_len <= pos.shape()[0], "add_positional_embedding: T=" + std::to_string(t_len) +
                                               " exceeds capacity " + std::to_string(pos.shape()[0]));
  const Storage st = detail::storage_of({&x, &pos});
  const bool half = st == Storage::half;
  Tensor<T> out = x.value().to_storage(st);
  const T* pe = pos.value().ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < t_len; ++t) {
        T* row = out.ptr() + ((b * channels + c) * t_len + t) * hw;
        const T e = pe[t * channels + c];
        for (std::size_t p = 0; p < hw; ++p) row[p] = half ? f16_round(row[p] + e) : row[p] + e;
      }
  return x.tape().record(std::move(out), {x, pos}, [batch, channels, t_len, hw, half](Node<T>& n) {
    n.inputs[0]->accumulate(n.grad);
    if (!n.inputs[1]->requires_grad) return;
    Tensor<T> gp = Tensor<T>::zeros_like(n.inputs[1]->value);
    // Sums over (b, hw) for each (c, t) slice, then reorder to [t, c].
    const T* g = n.grad.ptr();
    std::vector<T> sums(channels * t_len);
    channel_sums(batch, channels * t_len, hw, half, [g](std::size_t k) { return g[k]; }, sums.data());
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t c = 0; c < channels; ++c) gp[t * channels + c] = sums[c * t_len + t];
    n.inputs[1]->accumulate(gp);
  });
}

/// Scaled dot-product attention restricted to the token-centered window.
/// q, k, v are (B, heads*head_dim, T, H, W); output has the same shape.
template <class T>
Var<T> windowed_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                          std::size_t window) {
  const Shape& qs = q.shape();
  detail::require(qs.size() == 5 && k.shape() == qs && v.shape() == qs, "windowed_attention: q/k/v shape mismatch");
  detail::require(heads > 0 && qs[1] % heads == 0, "windowed_attention: channels not divisible by heads");
  detail::require(window % 2 == 1, "windowed_attention: window must be odd");
  const std::size_t batch = qs[0], channels = qs[1], t_len = qs[2], hw = qs[3] * qs[4];
  const std::size_t hd = channels / heads, r = (window - 1) / 2;
  const Storage st = detail::storage_of({&q, &k, &v});
  const bool half = st == Storage::half;
  const Arith<T> ar{half};
  const T scale = ar.round(static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));

  MacCounter::instance().add(static_cast<std::uint64_t>(batch) * heads * hw * window_pair_count(t_len, window) * 2 * hd);

  Tensor<T> out(qs, st);
  // Attention weights per (b, head, location, query), one slot per window offset.
  std::vector<T> weights(batch * heads * hw * t_len * window, T(0));
  const T *qv = q.value().ptr(), *kv = k.value().ptr(), *vv = v.value().ptr();
  auto idx = [&](std::size_t b, std::size_t c, std::size_t t, std::size_t p) {
    return ((b * channels + c) * t_len + t) * hw + p;
  };

  parallel_for(batch, [&](std::size_t b) {
    std::vector<T> score(window);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * hd;
      for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t t = 0; t < t_len; ++t) {
          const std::size_t lo = t >= r ? t - r : 0, hi = std::min(t_len - 1, t + r);
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t s = lo; s <= hi; ++s) {
            T dot = 0;
            for (std::size_t d = 0; d < hd; ++d) dot = ar.mac(dot, qv[idx(b, c0 + d, t, p)], kv[idx(b, c0 + d, s, p)]);
            score[s - lo] = ar.mul(dot, scale);
            mx = std::max(mx, score[s - lo]);
          }
          T total = 0;
          for (std::size_t s = lo; s <= hi; ++s) {
            score[s - lo] = ar.exp(ar.sub(score[s - lo], mx));
            total = ar.add(total, score[s - lo]);
          }
          T* w = weights.data() + (((b * heads + h) * hw + p) * t_len + t) * window;
          for (std::size_t s = lo; s <= hi; ++s) w[s + r - t] = ar.div(score[s - lo], total);
          for (std::size_t d = 0; d < hd; ++d) {
            T acc = 0;
            for (std::size_t s = lo; s <= hi; ++s) acc = ar.mac(acc, w[s + r - t], vv[idx(b, c0 + d, s, p)]);
            out[idx(b, c0 + d, t, p)] = acc;
          }
        }
      }
    }
  });

  return q.tape().record(
      std::move(out), {q, k, v},
      [weights = std::move(weights), batch, channels, t_len, hw, heads, hd, r, window, scale, ar](Node<T>& n) {
        const T *qv = n.inputs[0]->value.ptr(), *kv = n.inputs[1]->value.ptr(), *vv = n.inputs[2]->value.ptr();
        const T* gy = n.grad.ptr();
        Tensor<T> gq = Tensor<T>::zeros_like(n.value), gk = Tensor<T>::zeros_like(n.value),
                  gv = Tensor<T>::zeros_like(n.value);
        auto idx = [&](std::size_t b, std::size_t c, std::size_t t, std::size_t p) {
          return ((b * channels + c) * t_len + t) * hw + p;
        };
        parallel_for(batch, [&](std::size_t b) {
          std::vector<T> dattn(window), dscore(window);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * hd;
            for (std::size_t p = 0; p < hw; ++p) {
              for (std::size_t t = 0; t < t_len; ++t) {
                const std::size_t lo = t >= r ? t - r : 0, hi = std::min(t_len - 1, t + r);
                const T* w = weights.data() + (((b * heads + h) * hw + p) * t_len + t) * window;
                T dot = 0;
                for (std::size_t s = lo; s <= hi; ++s) {
                  T da = 0;
                  for (std::size_t d = 0; d < hd; ++d) {
                    da = ar.mac(da, gy[idx(b, c0 + d, t, p)], vv[idx(b, c0 + d, s, p)]);
                    T& gvs = gv[idx(b, c0 + d, s, p)];
                    gvs = ar.mac(gvs, w[s + r - t], gy[idx(b, c0 + d, t, p)]);
                  }
                  dattn[s - lo] = da;
                  dot = ar.mac(dot, w[s + r - t], da);
                }
                for (std::size_t s = lo; s <= hi; ++s) {
                  dscore[s - lo] = ar.mul(ar.mul(w[s + r - t], ar.sub(dattn[s - lo], dot)), scale);
                }
                for (std::size_t d = 0; d < hd; ++d) {
                  T acc = 0;
                  for (std::size_t s = lo; s <= hi; ++s) {
                    acc = ar.mac(acc, dscore[s - lo], kv[idx(b, c0 + d, s, p)]);
                    T& gks = gk[idx(b, c0 + d, s, p)];
                    gks = ar.mac(gks, dscore[s - lo], qv[idx(b, c0 + d, t, p)]);
                  }
                  gq[idx(b, c0 + d, t, p)] = acc;
                }
              }
            }
          }
        });
        n.inputs[0]->accumulate(gq);
        n.inputs[1]->accumulate(gk);
        n.inputs[2]->accumulate(gv);
      });
}

/// Bound parameters of one attention layer: pointwise projections stored as
/// (C, C, 1, 1, 1) convolution weights plus a (max_T, C) positional table.
template <class T>
struct AttentionVars {
  Var<T> pos_emb;
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Full local multi-head self-attention: positional embedding, QKV
/// projections, windowed attention, output projection.
template <class T>
Var<T> local_temporal_mhsa(const Var<T>& x, const AttentionVars<T>& p, const AttentionConfig& cfg) {
  cfg.validate();
  detail::require(x.shape().size() == 5, "local_temporal_mhsa: expected (B,C,T,H,W)");
  detail::require(x.shape()[1] == cfg.channels, "local_temporal_mhsa: input has " + std::to_string(x.shape()[1]) +
                                                    " channels, config expects " + std::to_string(cfg.channels));
  detail::require(x.shape()[2] <= cfg.max_t, "local_temporal_mhsa: T=" + std::to_string(x.shape()[2]) +
                                                 " exceeds max_T=" + std::to_string(cfg.max_t));
  const ConvSpec proj = ConvSpec::pointwise(cfg.channels, cfg.channels);
  const Var<T> tokens = add_positional_embedding(x, p.pos_emb);
  const Var<T> q = conv3d(tokens, p.wq, &p.bq, proj);
  const Var<T> k = conv3d(tokens, p.wk, &p.bk, proj);
  const Var<T> v = conv3d(tokens, p.wv, &p.bv, proj);
  const Var<T> mixed = windowed_attention(q, k, v, cfg.heads, cfg.window);
  return conv3d(mixed, p.wo, &p.bo, proj);
}

/// Exact multiply-accumulate count of local_temporal_mhsa on (B, C, T, H, W).
inline std::uint64_t local_mhsa_macs(const AttentionConfig& cfg, std::size_t batch, std::size_t t_len,
                                     std::size_t hw) {
  const std::uint64_t tokens = static_cast<std::uint64_t>(batch) * t_len * hw;
  const std::uint64_t projections = 4 * tokens * cfg.channels * cfg.channels;
  const std::uint64_t core =
      static_cast<std::uint64_t>(batch) * hw * cfg.heads * window_pair_count(t_len, cfg.window) * 2 * cfg.head_dim;
  return projections + core;
}

}  // namespace ca3d
