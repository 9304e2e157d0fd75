// Dense kernels: matrix multiply, 3D im2col/col2im and reductions.
//
// Every reduction runs in a fixed canonical order. In full precision a dot
// product is accumulated sequentially over its index. In binary16 the sum is
// split into consecutive blocks of kReduceBlock terms, accumulated
// sequentially inside a block, and block partials are combined by a fixed
// binary tree; each product and each addition is rounded.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "ca3d/half.hpp"

namespace ca3d {

inline constexpr std::size_t kReduceBlock = 32;

/// Global multiply-accumulate counter used by complexity benchmarks.
class MacCounter {
 public:
  static MacCounter& instance() {
    static MacCounter counter;
    return counter;
  }
  void add(std::uint64_t n) {
    if (enabled_.load(std::memory_order_relaxed)) count_.fetch_add(n, std::memory_order_relaxed);
  }
  void start() {
    count_ = 0;
    enabled_ = true;
  }
  std::uint64_t stop() {
    enabled_ = false;
    return count_.load();
  }

 private:
  std::atomic<bool> enabled_{false};
  std::atomic<std::uint64_t> count_{0};
};

/// Counts MACs executed while alive.
class ScopedMacCount {
 public:
  ScopedMacCount() { MacCounter::instance().start(); }
  ~ScopedMacCount() { MacCounter::instance().stop(); }
  std::uint64_t value() { return MacCounter::instance().stop(); }
  ScopedMacCount(const ScopedMacCount&) = delete;
  ScopedMacCount& operator=(const ScopedMacCount&) = delete;
};

/// Strided read-only matrix view.
template <class T>
struct MatView {
  const T* p = nullptr;
  std::size_t rs = 0;  // row stride
  std::size_t cs = 1;  // column stride
  T operator()(std::size_t r, std::size_t c) const { return p[r * rs + c * cs]; }
};

template <class T>
MatView<T> row_major(const T* p, std::size_t cols) {
  return {p, cols, 1};
}
template <class T>
MatView<T> transposed(const T* p, std::size_t cols_of_stored) {
  return {p, 1, cols_of_stored};
}

namespace detail {

#if defined(__F16C__) && defined(__AVX__)
inline __m256 round8(__m256 v) {
  return _mm256_cvtph_ps(_mm256_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT));
}
#endif

// c[i] = r(c[i] + r(a * b[i]))
inline void half_axpy(float a, const float* b, float* c, std::size_t n) {
  std::size_t i = 0;
#if defined(__F16C__) && defined(__AVX__)
  const __m256 va = _mm256_set1_ps(a);
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = round8(_mm256_mul_ps(va, _mm256_loadu_ps(b + i)));
    _mm256_storeu_ps(c + i, round8(_mm256_add_ps(_mm256_loadu_ps(c + i), prod)));
  }
#endif
  for (; i < n; ++i) c[i] = f16_round(c[i] + f16_round(a * b[i]));
}

inline void half_axpy(double a, const double* b, double* c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = f16_round(c[i] + f16_round(a * b[i]));
}

// c[i] = r(c[i] + d[i])
inline void half_add_into(float* c, const float* d, std::size_t n) {
  std::size_t i = 0;
#if defined(__F16C__) && defined(__AVX__)
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(c + i, round8(_mm256_add_ps(_mm256_loadu_ps(c + i), _mm256_loadu_ps(d + i))));
  }
#endif
  for (; i < n; ++i) c[i] = f16_round(c[i] + d[i]);
}

inline void half_add_into(double* c, const double* d, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] = f16_round(c[i] + d[i]);
}

template <class T>
void full_axpy(T a, const T* __restrict b, T* __restrict c, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) c[i] += a * b[i];
}

inline constexpr std::size_t kColumnChunk = 512;

#if defined(__F16C__) && defined(__AVX__)
// 4 x 16 register tile of C, accumulated over k in [k0, k1) in ascending order.
template <bool Half>
void tile_4x16(std::size_t k0, std::size_t k1, MatView<float> A, std::size_t m, const float* B,
               std::size_t ldb, std::size_t n, float* C, std::size_t ldc) {
  __m256 acc[4][2];
  for (auto& row : acc) row[0] = row[1] = _mm256_setzero_ps();
  for (std::size_t k = k0; k < k1; ++k) {
    const __m256 b0 = _mm256_loadu_ps(B + k * ldb + n);
    const __m256 b1 = _mm256_loadu_ps(B + k * ldb + n + 8);
    for (std::size_t i = 0; i < 4; ++i) {
      const __m256 a = _mm256_set1_ps(A(m + i, k));
      if constexpr (Half) {
        acc[i][0] = round8(_mm256_add_ps(acc[i][0], round8(_mm256_mul_ps(a, b0))));
        acc[i][1] = round8(_mm256_add_ps(acc[i][1], round8(_mm256_mul_ps(a, b1))));
      } else {
        acc[i][0] = _mm256_add_ps(acc[i][0], _mm256_mul_ps(a, b0));
        acc[i][1] = _mm256_add_ps(acc[i][1], _mm256_mul_ps(a, b1));
      }
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    _mm256_storeu_ps(C + (m + i) * ldc + n, acc[i][0]);
    _mm256_storeu_ps(C + (m + i) * ldc + n + 8, acc[i][1]);
  }
}
#endif

#if defined(__AVX512F__)
inline __m512 round16(__m512 v) {
  return _mm512_cvtph_ps(_mm512_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC));
}

template <bool Half>
void tile_4x32(std::size_t k0, std::size_t k1, MatView<float> A, std::size_t m, const float* B,
               std::size_t ldb, std::size_t n, float* C, std::size_t ldc) {
  __m512 acc[4][2];
  for (auto& row : acc) row[0] = row[1] = _mm512_setzero_ps();
  for (std::size_t k = k0; k < k1; ++k) {
    const __m512 b0 = _mm512_loadu_ps(B + k * ldb + n);
    const __m512 b1 = _mm512_loadu_ps(B + k * ldb + n + 16);
    for (std::size_t i = 0; i < 4; ++i) {
      const __m512 a = _mm512_set1_ps(A(m + i, k));
      if constexpr (Half) {
        acc[i][0] = round16(_mm512_add_ps(acc[i][0], round16(_mm512_mul_ps(a, b0))));
        acc[i][1] = round16(_mm512_add_ps(acc[i][1], round16(_mm512_mul_ps(a, b1))));
      } else {
        acc[i][0] = _mm512_add_ps(acc[i][0], _mm512_mul_ps(a, b0));
        acc[i][1] = _mm512_add_ps(acc[i][1], _mm512_mul_ps(a, b1));
      }
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    _mm512_storeu_ps(C + (m + i) * ldc + n, acc[i][0]);
    _mm512_storeu_ps(C + (m + i) * ldc + n + 16, acc[i][1]);
  }
}
#endif

// Sequential-in-k product over [k0, k1) written to C (overwrites).
template <class T>
void gemm_leaf(std::size_t M, std::size_t N, std::size_t k0, std::size_t k1, MatView<T> A, const T* B, T* C,
               bool half) {
  std::fill(C, C + M * N, T(0));
  std::size_t m_done = 0, n_done = 0;
#if defined(__F16C__) && defined(__AVX__)
  if constexpr (std::is_same_v<T, float>) {
    m_done = M / 4 * 4;
    n_done = N / 16 * 16;
    for (std::size_t m = 0; m < m_done; m += 4) {
      std::size_t n = 0;
#if defined(__AVX512F__)
      for (; n + 32 <= n_done; n += 32) {
        if (half) {
          tile_4x32<true>(k0, k1, A, m, B, N, n, C, N);
        } else {
          tile_4x32<false>(k0, k1, A, m, B, N, n, C, N);
        }
      }
#endif
      for (; n < n_done; n += 16) {
        if (half) {
          tile_4x16<true>(k0, k1, A, m, B, N, n, C, N);
        } else {
          tile_4x16<false>(k0, k1, A, m, B, N, n, C, N);
        }
      }
    }
  }
#endif
  // Remaining rows (all columns) and remaining columns of the tiled rows.
  auto strip = [&](std::size_t m_begin, std::size_t m_end, std::size_t n_begin) {
    if (n_begin >= N) return;
    for (std::size_t n0 = n_begin; n0 < N; n0 += kColumnChunk) {
      const std::size_t nn = std::min(kColumnChunk, N - n0);
      for (std::size_t m = m_begin; m < m_end; ++m) {
        T* c = C + m * N + n0;
        for (std::size_t k = k0; k < k1; ++k) {
          const T a = A(m, k);
          if (half) {
            half_axpy(a, B + k * N + n0, c, nn);
          } else {
            full_axpy(a, B + k * N + n0, c, nn);
          }
        }
      }
    }
  };
  strip(0, m_done, n_done);
  strip(m_done, M, 0);
}

// C[M x N] = A[:, k0:k1] * B[k0:k1, :], B contiguous with leading dimension N.
template <class T>
void gemm_range(std::size_t M, std::size_t N, std::size_t k0, std::size_t k1, MatView<T> A,
                const T* B, T* C, bool half) {
  if (!half || k1 - k0 <= kReduceBlock) {
    gemm_leaf(M, N, k0, k1, A, B, C, half);
    return;
  }
  const std::size_t blocks = (k1 - k0 + kReduceBlock - 1) / kReduceBlock;
  const std::size_t mid = k0 + (blocks / 2) * kReduceBlock;
  gemm_range(M, N, k0, mid, A, B, C, half);
  std::vector<T> right(M * N);
  gemm_range(M, N, mid, k1, A, B, right.data(), half);
  half_add_into(C, right.data(), M * N);
}

}  // namespace detail

/// C = A * B with A (M x K) and B (K x N) given as strided views; C is M x N row-major.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, MatView<T> A, MatView<T> B, T* C,
          bool half) {
  MacCounter::instance().add(static_cast<std::uint64_t>(M) * N * K);
  std::vector<T> packed;
  const T* b = B.p;
  if (!(B.cs == 1 && B.rs == N)) {
    packed.resize(K * N);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t n = 0; n < N; ++n) packed[k * N + n] = B(k, n);
    b = packed.data();
  }
  if (K == 0) {
    std::fill(C, C + M * N, T(0));
    return;
  }
  detail::gemm_range(M, N, 0, K, A, b, C, half);
}

/// Canonical-order sum: sequential in full precision, blocked pairwise with
/// rounding in binary16.
template <class T>
T reduce_sum(std::span<const T> values, bool half) {
  if (!half) {
    T s = 0;
    for (T v : values) s += v;
    return s;
  }
  if (values.size() <= kReduceBlock) {
    T s = 0;
    for (T v : values) s = f16_round(s + v);
    return s;
  }
  const std::size_t blocks = (values.size() + kReduceBlock - 1) / kReduceBlock;
  const std::size_t mid = (blocks / 2) * kReduceBlock;
  return f16_round(reduce_sum(values.first(mid), half) + reduce_sum(values.subspan(mid), half));
}

/// Per-channel canonical sums over a (batch, channels, inner) layout:
/// out[c] equals reduce_sum over value(k) for k = (b * channels + c) * inner + i
/// in (b, i) order. Channels are processed in groups so independent
/// accumulation chains overlap; each channel's order is unchanged.
template <class T, class Fn>
void channel_sums(std::size_t batch, std::size_t channels, std::size_t inner, bool half, Fn&& value, T* out) {
  constexpr std::size_t kGroup = 8;
  const std::size_t pop = batch * inner;
  const std::size_t blocks = std::max<std::size_t>(1, (pop + kReduceBlock - 1) / kReduceBlock);
  std::vector<T> partial(half ? kGroup * blocks : 0);
  for (std::size_t c0 = 0; c0 < channels; c0 += kGroup) {
    const std::size_t cg = std::min(kGroup, channels - c0);
    T acc[kGroup] = {};
    std::size_t p = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c0) * inner;
      for (std::size_t i = 0; i < inner; ++i, ++p) {
        if (!half) {
          for (std::size_t j = 0; j < cg; ++j) acc[j] += value(base + j * inner + i);
          continue;
        }
        if (p % kReduceBlock == 0 && p > 0) {
          for (std::size_t j = 0; j < cg; ++j) {
            partial[j * blocks + p / kReduceBlock - 1] = acc[j];
            acc[j] = T(0);
          }
        }
        for (std::size_t j = 0; j < cg; ++j) acc[j] = f16_round(acc[j] + value(base + j * inner + i));
      }
    }
    if (!half) {
      for (std::size_t j = 0; j < cg; ++j) out[c0 + j] = acc[j];
      continue;
    }
    for (std::size_t j = 0; j < cg; ++j) {
      partial[j * blocks + blocks - 1] = acc[j];
      // Same binary tree over block partials as reduce_sum.
      auto tree = [&](auto&& self, std::size_t lo, std::size_t hi) -> T {
        if (hi - lo == 1) return partial[j * blocks + lo];
        const std::size_t mid = lo + (hi - lo) / 2;
        return f16_round(self(self, lo, mid) + self(self, mid, hi));
      };
      out[c0 + j] = tree(tree, 0, blocks);
    }
  }
}

/// Per-channel means over the same layout as channel_sums. In full precision
/// this is the sequential sum divided by the population. In binary16 a raw
/// sum over a large population overflows long before the mean does, so each
/// block partial becomes a block mean and the tree combines means with
/// weights count/total; no intermediate exceeds the largest |value|.
template <class T, class Fn>
void channel_means(std::size_t batch, std::size_t channels, std::size_t inner, bool half, Fn&& value, T* out) {
  const std::size_t pop = batch * inner;
  if (!half) {
    channel_sums(batch, channels, inner, false, value, out);
    for (std::size_t c = 0; c < channels; ++c) out[c] /= static_cast<T>(pop);
    return;
  }
  const std::size_t blocks = std::max<std::size_t>(1, (pop + kReduceBlock - 1) / kReduceBlock);
  std::vector<T> partial(blocks);
  for (std::size_t c = 0; c < channels; ++c) {
    T acc = 0;
    std::size_t p = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i, ++p) {
        if (p % kReduceBlock == 0 && p > 0) {
          partial[p / kReduceBlock - 1] = f16_round(acc / static_cast<T>(kReduceBlock));
          acc = T(0);
        }
        acc = f16_round(acc + value(base + i));
      }
    }
    const std::size_t last = pop - (blocks - 1) * kReduceBlock;
    partial[blocks - 1] = f16_round(acc / static_cast<T>(last));
    auto count = [&](std::size_t lo, std::size_t hi) { return std::min(hi * kReduceBlock, pop) - lo * kReduceBlock; };
    auto tree = [&](auto&& self, std::size_t lo, std::size_t hi) -> T {
      if (hi - lo == 1) return partial[lo];
      const std::size_t mid = lo + (hi - lo) / 2;
      const T n = static_cast<T>(count(lo, hi));
      const T wl = f16_round(static_cast<T>(count(lo, mid)) / n), wr = f16_round(static_cast<T>(count(mid, hi)) / n);
      return f16_round(f16_round(self(self, lo, mid) * wl) + f16_round(self(self, mid, hi) * wr));
    };
    out[c] = tree(tree, 0, blocks);
  }
}

/// Geometry of a 3D convolution over (C, T, H, W) inputs.
struct ConvGeometry {
  std::size_t channels = 0, in_t = 0, in_h = 0, in_w = 0;
  std::size_t kt = 1, kh = 1, kw = 1;
  std::size_t st = 1, sh = 1, sw = 1;
  std::size_t pt = 0, ph = 0, pw = 0;

  std::size_t out_t() const { return (in_t + 2 * pt - kt) / st + 1; }
  std::size_t out_h() const { return (in_h + 2 * ph - kh) / sh + 1; }
  std::size_t out_w() const { return (in_w + 2 * pw - kw) / sw + 1; }
  std::size_t patch() const { return channels * kt * kh * kw; }
  std::size_t positions() const { return out_t() * out_h() * out_w(); }
  bool is_pointwise() const {
    return kt == 1 && kh == 1 && kw == 1 && st == 1 && sh == 1 && sw == 1 && pt == 0 && ph == 0 &&
           pw == 0;
  }
  bool valid() const {
    return in_t + 2 * pt >= kt && in_h + 2 * ph >= kh && in_w + 2 * pw >= kw && st && sh && sw;
  }
};

namespace detail {

// Walks the patch matrix row by row in runs along the output x axis:
// run(row, col, input_index, count) covers `count` in-range entries whose
// inputs are input_index + j * sw; pad(row, col, count) covers zero padding.
template <class Run, class Pad>
void for_each_patch_run(const ConvGeometry& g, Run&& run, Pad&& pad) {
  using idx_t = std::ptrdiff_t;
  const std::size_t ot = g.out_t(), oh = g.out_h(), ow = g.out_w();
  const auto inside = [](idx_t v, std::size_t n) { return v >= 0 && v < static_cast<idx_t>(n); };
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t dt = 0; dt < g.kt; ++dt)
      for (std::size_t dy = 0; dy < g.kh; ++dy)
        for (std::size_t dx = 0; dx < g.kw; ++dx, ++row) {
          // Output columns x whose input column x * sw + dx - pw is in range.
          std::size_t x_lo = 0, x_hi = 0;
          if (dx < g.pw) x_lo = (g.pw - dx + g.sw - 1) / g.sw;
          if (g.in_w + g.pw > dx) x_hi = std::min(ow, (g.in_w + g.pw - dx + g.sw - 1) / g.sw);
          x_lo = std::min(x_lo, x_hi);
          std::size_t col = 0;
          for (std::size_t t = 0; t < ot; ++t) {
            const idx_t it = static_cast<idx_t>(t * g.st + dt) - static_cast<idx_t>(g.pt);
            for (std::size_t y = 0; y < oh; ++y, col += ow) {
              const idx_t iy = static_cast<idx_t>(y * g.sh + dy) - static_cast<idx_t>(g.ph);
              if (!inside(it, g.in_t) || !inside(iy, g.in_h)) {
                pad(row, col, ow);
                continue;
              }
              const idx_t base = ((static_cast<idx_t>(c) * static_cast<idx_t>(g.in_t) + it) * static_cast<idx_t>(g.in_h) + iy) *
                                     static_cast<idx_t>(g.in_w) +
                                 static_cast<idx_t>(dx) - static_cast<idx_t>(g.pw);
              if (x_lo > 0) pad(row, col, x_lo);
              if (x_hi > x_lo) run(row, col + x_lo, static_cast<std::size_t>(base + static_cast<idx_t>(x_lo * g.sw)), x_hi - x_lo);
              if (ow > x_hi) pad(row, col + x_hi, ow - x_hi);
            }
          }
        }
}

}  // namespace detail

/// Patch matrix [patch x positions] for one sample.
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t n = g.positions(), sw = g.sw;
  detail::for_each_patch_run(
      g,
      [&](std::size_t r, std::size_t c, std::size_t idx, std::size_t count) {
        T* dst = col + r * n + c;
        if (sw == 1) {
          std::copy_n(x + idx, count, dst);
        } else {
          for (std::size_t j = 0; j < count; ++j) dst[j] = x[idx + j * sw];
        }
      },
      [&](std::size_t r, std::size_t c, std::size_t count) { std::fill_n(col + r * n + c, count, T(0)); });
}

/// Transposed patch matrix [positions x patch].
template <class T>
void im2row(const ConvGeometry& g, const T* x, T* rows) {
  const std::size_t n = g.positions(), p = g.patch();
  std::vector<T> col(p * n);
  im2col(g, x, col.data());
  constexpr std::size_t kTile = 16;
  for (std::size_t r0 = 0; r0 < p; r0 += kTile)
    for (std::size_t c0 = 0; c0 < n; c0 += kTile)
      for (std::size_t c = c0; c < std::min(n, c0 + kTile); ++c)
        for (std::size_t r = r0; r < std::min(p, r0 + kTile); ++r) rows[c * p + r] = col[r * n + c];
}

/// Scatter-adds a patch-matrix gradient back onto the input gradient.
template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx, bool half) {
  const std::size_t n = g.positions(), sw = g.sw;
  detail::for_each_patch_run(
      g,
      [&](std::size_t r, std::size_t c, std::size_t idx, std::size_t count) {
        const T* src = col + r * n + c;
        if (half && sw == 1) {
          detail::half_add_into(dx + idx, src, count);
        } else if (half) {
          for (std::size_t j = 0; j < count; ++j) dx[idx + j * sw] = f16_round(dx[idx + j * sw] + src[j]);
        } else {
          for (std::size_t j = 0; j < count; ++j) dx[idx + j * sw] += src[j];
        }
      },
      [](std::size_t, std::size_t, std::size_t) {});
}

/// a[i] += b[i], rounded in binary16.
template <class T>
void add_into(std::span<T> a, std::span<const T> b, bool half) {
  if (half) {
    detail::half_add_into(a.data(), b.data(), a.size());
  } else {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  }
}

}  // namespace ca3d
