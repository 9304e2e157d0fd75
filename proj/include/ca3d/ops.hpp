// Differentiable operations on (B, C, T, H, W) feature maps.
//
// An output is stored in binary16 whenever any input is, and then every
// arithmetic result of the forward and backward computation is rounded.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ca3d/autodiff.hpp"
#include "ca3d/kernels.hpp"
#include "ca3d/parallel.hpp"

namespace ca3d {

namespace detail {

template <class T>
Storage storage_of(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars) {
    if (v->half()) return Storage::half;
  }
  return Storage::full;
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  const Storage st = detail::storage_of({&a, &b});
  Tensor<T> out = a.value().to_storage(st);
  add_into(out.data(), b.value().data(), st == Storage::half);
  return a.tape().record(std::move(out), {a, b}, [](Node<T>& n) {
    n.inputs[0]->accumulate(n.grad);
    n.inputs[1]->accumulate(n.grad);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  const Storage st = detail::storage_of({&a, &b});
  const Arith<T> ar{st == Storage::half};
  Tensor<T> out(a.shape(), st);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ar.mul(a.value()[i], b.value()[i]);
  return a.tape().record(std::move(out), {a, b}, [ar](Node<T>& n) {
    const Tensor<T>& x = n.inputs[0]->value;
    const Tensor<T>& y = n.inputs[1]->value;
    Tensor<T> gx = Tensor<T>::zeros_like(n.value), gy = Tensor<T>::zeros_like(n.value);
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      gx[i] = ar.mul(n.grad[i], y[i]);
      gy[i] = ar.mul(n.grad[i], x[i]);
    }
    n.inputs[0]->accumulate(gx);
    n.inputs[1]->accumulate(gy);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  const Arith<T> ar{a.half()};
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = ar.mul(v, factor);
  return a.tape().record(std::move(out), {a}, [ar, factor](Node<T>& n) {
    Tensor<T> g = n.grad;
    for (T& v : g.data()) v = ar.mul(v, factor);
    n.inputs[0]->accumulate(g);
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  return x.tape().record(std::move(out), {x}, [](Node<T>& n) {
    const Tensor<T>& in = n.inputs[0]->value;
    Tensor<T> g = n.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (!(in[i] > T(0))) g[i] = T(0);
    }
    n.inputs[0]->accumulate(g);
  });
}

/// Sum of all elements as a shape-(1) tensor.
template <class T>
Var<T> sum(const Var<T>& x) {
  const bool half = x.half();
  Tensor<T> out({1}, x.value().storage());
  out[0] = reduce_sum(x.value().data(), half);
  return x.tape().record(std::move(out), {x}, [](Node<T>& n) {
    n.inputs[0]->accumulate(Tensor<T>::filled(n.inputs[0]->value.shape(), n.grad[0], n.grad.storage()));
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

/// Identity whose forward rounds onto the binary16 grid; gradients pass
/// straight through.
template <class T>
Var<T> fake_quantize(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = f16_round(v);
  return x.tape().record(std::move(out), {x}, [](Node<T>& n) { n.inputs[0]->accumulate(n.grad); });
}

// ---------------------------------------------------------------------------
// Convolution

/// 3D convolution hyper-parameters; spatial convs have kt == 1, temporal
/// convs have kh == kw == 1.
struct ConvSpec {
  std::size_t in_channels = 1, out_channels = 1;
  std::size_t kt = 1, kh = 1, kw = 1;
  std::size_t st = 1, sh = 1, sw = 1;
  std::size_t pt = 0, ph = 0, pw = 0;
  bool bias = true;

  static ConvSpec spatial(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                          std::size_t pad, bool bias = true) {
    return {cin, cout, 1, k, k, 1, stride, stride, 0, pad, pad, bias};
  }
  static ConvSpec temporal(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                           std::size_t pad, bool bias = true) {
    return {cin, cout, k, 1, 1, stride, 1, 1, pad, 0, 0, bias};
  }
  static ConvSpec pointwise(std::size_t cin, std::size_t cout, bool bias = true) {
    return {cin, cout, 1, 1, 1, 1, 1, 1, 0, 0, 0, bias};
  }

  bool is_spatial() const { return kt == 1 && st == 1 && pt == 0; }
  bool is_temporal() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0; }
  Shape weight_shape() const { return {out_channels, in_channels, kt, kh, kw}; }
  std::size_t weight_count() const { return out_channels * in_channels * kt * kh * kw; }
  std::size_t param_count() const { return weight_count() + (bias ? out_channels : 0); }

  ConvGeometry geometry(const Shape& x) const {
    return {in_channels, x[2], x[3], x[4], kt, kh, kw, st, sh, sw, pt, ph, pw};
  }
  Shape output_shape(const Shape& x) const {
    const ConvGeometry g = geometry(x);
    return {x[0], out_channels, g.out_t(), g.out_h(), g.out_w()};
  }
};

/// General 3D cross-correlation; `bias` may be an empty Var when spec.bias is false.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 5, "conv3d: expected (B,C,T,H,W) input, got " + shape_str(xs));
  detail::require(xs[1] == spec.in_channels, "conv3d: input has " + std::to_string(xs[1]) +
                                                 " channels, spec expects " +
                                                 std::to_string(spec.in_channels));
  detail::require(weight.shape() == spec.weight_shape(), "conv3d: weight shape mismatch");
  detail::require(!spec.bias || (bias != nullptr && bias->shape() == Shape{spec.out_channels}),
                  "conv3d: bias shape mismatch");
  const ConvGeometry g = spec.geometry(xs);
  detail::require(g.valid(), "conv3d: kernel larger than padded input " + shape_str(xs));

  const Storage st = spec.bias ? detail::storage_of({&x, &weight, bias}) : detail::storage_of({&x, &weight});
  const bool half = st == Storage::half;
  const std::size_t batch = xs[0], cin_size = spec.in_channels * g.in_t * g.in_h * g.in_w;
  const std::size_t npos = g.positions(), patch = g.patch(), cout = spec.out_channels;
  Tensor<T> out(spec.output_shape(xs), st);
  const T* w = weight.value().ptr();
  const T* bvals = spec.bias ? bias->value().ptr() : nullptr;

  parallel_for(batch, [&](std::size_t b) {
    const T* xb = x.value().ptr() + b * cin_size;
    T* yb = out.ptr() + b * cout * npos;
    std::vector<T> col;
    const T* bmat = xb;
    if (!g.is_pointwise()) {
      col.resize(patch * npos);
      im2col(g, xb, col.data());
      bmat = col.data();
    }
    gemm(cout, npos, patch, row_major(w, patch), row_major(bmat, npos), yb, half);
    if (bvals != nullptr) {
      for (std::size_t c = 0; c < cout; ++c) {
        T* row = yb + c * npos;
        for (std::size_t i = 0; i < npos; ++i) row[i] = half ? f16_round(row[i] + bvals[c]) : row[i] + bvals[c];
      }
    }
  });

  std::vector<Var<T>> inputs{x, weight};
  if (spec.bias) inputs.push_back(*bias);
  return x.tape().record(std::move(out), std::move(inputs), [spec, g, half](Node<T>& n) {
    const Tensor<T>& xv = n.inputs[0]->value;
    const Tensor<T>& wv = n.inputs[1]->value;
    const std::size_t batch = xv.dim(0), npos = g.positions(), patch = g.patch();
    const std::size_t cout = spec.out_channels, cin_size = xv.numel() / batch;
    const T* gy = n.grad.ptr();

    if (n.inputs[1]->requires_grad) {
      std::vector<std::vector<T>> partial(batch);
      parallel_for(batch, [&](std::size_t b) {
        std::vector<T> rows(npos * patch);
        im2row(g, xv.ptr() + b * cin_size, rows.data());
        partial[b].resize(cout * patch);
        gemm(cout, patch, npos, row_major(gy + b * cout * npos, npos), row_major(rows.data(), patch),
             partial[b].data(), half);
      });
      Tensor<T> gw(wv.shape(), wv.storage());
      for (std::size_t b = 0; b < batch; ++b) add_into(gw.data(), std::span<const T>(partial[b]), half);
      n.inputs[1]->accumulate(gw);
    }
    if (spec.bias && n.inputs[2]->requires_grad) {
      Tensor<T> gb({cout}, n.inputs[2]->value.storage());
      channel_sums(batch, cout, npos, half, [&](std::size_t k) { return gy[k]; }, gb.ptr());
      n.inputs[2]->accumulate(gb);
    }
    if (n.inputs[0]->requires_grad) {
      Tensor<T> gx(xv.shape(), xv.storage());
      parallel_for(batch, [&](std::size_t b) {
        T* dxb = gx.ptr() + b * cin_size;
        if (g.is_pointwise()) {
          gemm(patch, npos, cout, transposed(wv.ptr(), patch), row_major(gy + b * cout * npos, npos), dxb,
               half);
        } else {
          std::vector<T> dcol(patch * npos);
          gemm(patch, npos, cout, transposed(wv.ptr(), patch), row_major(gy + b * cout * npos, npos),
               dcol.data(), half);
          col2im_add(g, dcol.data(), dxb, half);
        }
      });
      n.inputs[0]->accumulate(gx);
    }
  });
}

/// Per-frame spatial convolution (kt == 1).
template <class T>
Var<T> conv_spatial(const Var<T>& x, const ConvSpec& spec, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias) {
  detail::require(spec.is_spatial(), "conv_spatial: kernel must have kt == 1 and no temporal stride/padding");
  return conv3d(x, weight, bias, spec);
}

/// Per-location temporal convolution (kh == kw == 1).
template <class T>
Var<T> conv_temporal(const Var<T>& x, const ConvSpec& spec, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias) {
  detail::require(spec.is_temporal(), "conv_temporal: kernel must have kh == kw == 1");
  return conv3d(x, weight, bias, spec);
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  BatchNormState(std::size_t channels, Storage st, double eps_value, double momentum_value = 0.1)
      : running_mean({channels}, st), running_var(Tensor<T>::filled({channels}, T(1), st)),
        momentum(momentum_value), eps(eps_value) {}
};

/// Default epsilon: binary16 cannot resolve variance denominators near 1e-5.
inline double default_bn_eps(Storage st) { return st == Storage::half ? 1e-3 : 1e-5; }

/// Batch normalization over every axis except channels (axis 1). Training
/// mode normalizes with batch statistics and updates `state`; eval mode uses
/// the running statistics.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                 bool training) {
  const Shape& xs = x.shape();
  detail::require(xs.size() >= 2, "batchnorm: expected at least (B,C) input");
  const std::size_t batch = xs[0], channels = xs[1], inner = x.value().numel() / (batch * channels);
  detail::require(gamma.shape() == Shape{channels} && beta.shape() == Shape{channels},
                  "batchnorm: affine parameter shape mismatch");
  const std::size_t pop = batch * inner;
  detail::require(!training || pop >= 2, "batchnorm: training needs at least 2 values per channel, got " +
                                             std::to_string(pop));
  const Storage st = detail::storage_of({&x, &gamma, &beta});
  const bool half = st == Storage::half;
  const Arith<T> ar{half};
  const T eps = ar.round(static_cast<T>(state.eps));
  const T mom = ar.round(static_cast<T>(state.momentum));

  Tensor<T> out(xs, st);
  Tensor<T> xhat(xs, st);
  std::vector<T> inv_std(channels);
  const T* xv = x.value().ptr();
  auto at = [&](std::size_t b, std::size_t c, std::size_t i) { return (b * channels + c) * inner + i; };

  std::vector<T> mean(channels), sq(channels);
  if (training) {
    auto sqdev = [&](std::size_t k) {
      const T d = ar.sub(xv[k], mean[(k / inner) % channels]);
      return ar.mul(d, d);
    };
    if (half) {
      // Means, not sums: sums over a whole batch overflow binary16.
      channel_means(batch, channels, inner, true, [&](std::size_t k) { return xv[k]; }, mean.data());
      channel_means(batch, channels, inner, true, sqdev, sq.data());
    } else {
      channel_sums(batch, channels, inner, false, [&](std::size_t k) { return xv[k]; }, mean.data());
      for (T& m : mean) m = ar.div(m, static_cast<T>(pop));
      channel_sums(batch, channels, inner, false, sqdev, sq.data());
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    T mu, var;
    if (training) {
      mu = mean[c];
      T unbiased;
      if (half) {
        var = sq[c];
        unbiased = ar.mul(var, ar.round(static_cast<T>(static_cast<double>(pop) / static_cast<double>(pop - 1))));
      } else {
        var = ar.div(sq[c], static_cast<T>(pop));
        unbiased = ar.div(sq[c], static_cast<T>(pop - 1));
      }
      T& rm = state.running_mean[c];
      T& rv = state.running_var[c];
      rm = ar.add(ar.mul(ar.sub(T(1), mom), rm), ar.mul(mom, mu));
      rv = ar.add(ar.mul(ar.sub(T(1), mom), rv), ar.mul(mom, unbiased));
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = ar.div(T(1), ar.sqrt(ar.add(var, eps)));
    const T gm = gamma.value()[c], bt = beta.value()[c];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = at(b, c, i);
        xhat[k] = ar.mul(ar.sub(xv[k], mu), inv_std[c]);
        out[k] = ar.add(ar.mul(gm, xhat[k]), bt);
      }
    }
  }

  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), training, ar, half, batch, channels, inner,
       pop](Node<T>& n) {
        const T* gy = n.grad.ptr();
        const Tensor<T>& gamma_v = n.inputs[1]->value;
        auto at = [&](std::size_t b, std::size_t c, std::size_t i) { return (b * channels + c) * inner + i; };
        Tensor<T> gx(xhat.shape(), n.value.storage());
        Tensor<T> ggamma({channels}, gamma_v.storage()), gbeta({channels}, gamma_v.storage());
        channel_sums(batch, channels, inner, half, [&](std::size_t k) { return gy[k]; }, gbeta.ptr());
        channel_sums(
            batch, channels, inner, half, [&](std::size_t k) { return ar.mul(gy[k], xhat[k]); }, ggamma.ptr());
        std::vector<T> mean_dy_all, mean_dyx_all;
        if (training && half) {
          mean_dy_all.resize(channels);
          mean_dyx_all.resize(channels);
          channel_means(batch, channels, inner, true, [&](std::size_t k) { return gy[k]; }, mean_dy_all.data());
          channel_means(
              batch, channels, inner, true, [&](std::size_t k) { return ar.mul(gy[k], xhat[k]); }, mean_dyx_all.data());
        }
        for (std::size_t c = 0; c < channels; ++c) {
          const T sum_dy = gbeta[c];
          const T sum_dyx = ggamma[c];
          const T gscale = ar.mul(gamma_v[c], inv_std[c]);
          if (training && half) {
            // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
            const T mean_dy = mean_dy_all[c], mean_dyx = mean_dyx_all[c];
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = at(b, c, i);
                gx[k] = ar.mul(gscale, ar.sub(ar.sub(gy[k], mean_dy), ar.mul(xhat[k], mean_dyx)));
              }
            }
          } else if (training) {
            // dx = gamma * inv_std / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
            const T coef = ar.div(gscale, static_cast<T>(pop));
            const T npop = ar.round(static_cast<T>(pop));
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = at(b, c, i);
                const T inner_term = ar.sub(ar.sub(ar.mul(npop, gy[k]), sum_dy), ar.mul(xhat[k], sum_dyx));
                gx[k] = ar.mul(coef, inner_term);
              }
            }
          } else {
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = at(b, c, i);
                gx[k] = ar.mul(gscale, gy[k]);
              }
            }
          }
        }
        n.inputs[0]->accumulate(gx);
        n.inputs[1]->accumulate(ggamma);
        n.inputs[2]->accumulate(gbeta);
      });
}

// ---------------------------------------------------------------------------
// Pooling, classifier head, regularization, loss

/// Max pooling along T with windows of `size` frames every `stride` frames.
template <class T>
Var<T> max_pool_temporal(const Var<T>& x, std::size_t size, std::size_t stride) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 5, "max_pool_temporal: expected (B,C,T,H,W)");
  detail::require(size >= 1 && stride >= 1, "max_pool_temporal: size and stride must be positive");
  detail::require(xs[2] >= size, "max_pool_temporal: T=" + std::to_string(xs[2]) + " smaller than window " +
                                     std::to_string(size));
  const std::size_t bc = xs[0] * xs[1], tin = xs[2], hw = xs[3] * xs[4];
  const std::size_t tout = (tin - size) / stride + 1;
  Tensor<T> out({xs[0], xs[1], tout, xs[3], xs[4]}, x.value().storage());
  std::vector<std::size_t> argmax(out.numel());
  const T* xv = x.value().ptr();
  for (std::size_t s = 0; s < bc; ++s) {
    for (std::size_t t = 0; t < tout; ++t) {
      for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = (s * tin + t * stride) * hw + p;
        for (std::size_t d = 1; d < size; ++d) {
          const std::size_t k = (s * tin + t * stride + d) * hw + p;
          if (xv[k] > xv[best]) best = k;
        }
        const std::size_t o = (s * tout + t) * hw + p;
        out[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& n) {
    Tensor<T> gx = Tensor<T>::zeros_like(n.inputs[0]->value);
    const bool half = gx.is_half();
    for (std::size_t o = 0; o < argmax.size(); ++o) {
      const T v = gx[argmax[o]] + n.grad[o];
      gx[argmax[o]] = half ? f16_round(v) : v;
    }
    n.inputs[0]->accumulate(gx);
  });
}

/// Mean over (T, H, W): (B,C,T,H,W) -> (B,C).
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 5, "global_avg_pool: expected (B,C,T,H,W)");
  const std::size_t bc = xs[0] * xs[1], inner = xs[2] * xs[3] * xs[4];
  const bool half = x.half();
  const Arith<T> ar{half};
  Tensor<T> out({xs[0], xs[1]}, x.value().storage());
  for (std::size_t s = 0; s < bc; ++s) {
    out[s] = ar.div(reduce_sum(x.value().data().subspan(s * inner, inner), half), static_cast<T>(inner));
  }
  return x.tape().record(std::move(out), {x}, [ar, inner](Node<T>& n) {
    Tensor<T> gx = Tensor<T>::zeros_like(n.inputs[0]->value);
    for (std::size_t s = 0; s < n.grad.numel(); ++s) {
      const T g = ar.div(n.grad[s], static_cast<T>(inner));
      std::fill_n(gx.ptr() + s * inner, inner, g);
    }
    n.inputs[0]->accumulate(gx);
  });
}

/// Fully connected layer: x (B, In), weight (Out, In), bias (Out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::require(x.shape().size() == 2, "linear: expected (B, In) input");
  const std::size_t batch = x.shape()[0], in = x.shape()[1], outf = weight.shape()[0];
  detail::require(weight.shape() == Shape{outf, in}, "linear: weight shape mismatch");
  detail::require(bias.shape() == Shape{outf}, "linear: bias shape mismatch");
  const Storage st = detail::storage_of({&x, &weight, &bias});
  const bool half = st == Storage::half;
  Tensor<T> out({batch, outf}, st);
  gemm(batch, outf, in, row_major(x.value().ptr(), in), transposed(weight.value().ptr(), in), out.ptr(), half);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < outf; ++o) {
      const T v = out[b * outf + o] + bias.value()[o];
      out[b * outf + o] = half ? f16_round(v) : v;
    }
  return x.tape().record(std::move(out), {x, weight, bias}, [batch, in, outf, half](Node<T>& n) {
    const T* gy = n.grad.ptr();
    if (n.inputs[0]->requires_grad) {
      Tensor<T> gx = Tensor<T>::zeros_like(n.inputs[0]->value);
      gemm(batch, in, outf, row_major(gy, outf), row_major(n.inputs[1]->value.ptr(), in), gx.ptr(), half);
      n.inputs[0]->accumulate(gx);
    }
    if (n.inputs[1]->requires_grad) {
      Tensor<T> gw = Tensor<T>::zeros_like(n.inputs[1]->value);
      gemm(outf, in, batch, transposed(gy, outf), row_major(n.inputs[0]->value.ptr(), in), gw.ptr(), half);
      n.inputs[1]->accumulate(gw);
    }
    if (n.inputs[2]->requires_grad) {
      Tensor<T> gb = Tensor<T>::zeros_like(n.inputs[2]->value);
      channel_sums(batch, outf, 1, half, [&](std::size_t k) { return gy[k]; }, gb.ptr());
      n.inputs[2]->accumulate(gb);
    }
  });
}

/// Inverted dropout: kept activations are scaled by 1/(1-rate) in training;
/// identity in eval mode.
template <class T, class Rng>
Var<T> dropout(const Var<T>& x, double rate, bool training, Rng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const Arith<T> ar{x.half()};
  const T keep_scale = ar.round(static_cast<T>(1.0 / (1.0 - rate)));
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor<T> mask = Tensor<T>::zeros_like(x.value());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    mask[i] = keep(rng) ? keep_scale : T(0);
    out[i] = ar.mul(out[i], mask[i]);
  }
  return x.tape().record(std::move(out), {x}, [mask = std::move(mask), ar](Node<T>& n) {
    Tensor<T> g = n.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = ar.mul(g[i], mask[i]);
    n.inputs[0]->accumulate(g);
  });
}

/// Mean softmax cross-entropy with max-subtraction; logits (B, K).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::require(logits.shape().size() == 2, "cross_entropy: expected (B, K) logits");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  detail::require(labels.size() == batch, "cross_entropy: label count does not match batch");
  for (int y : labels) {
    detail::require(y >= 0 && static_cast<std::size_t>(y) < classes,
                    "cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  }
  const bool half = logits.half();
  const Arith<T> ar{half};
  const T* z = logits.value().ptr();
  Tensor<T> probs({batch, classes}, logits.value().storage());
  std::vector<T> per_sample(batch), expv(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    const T mx = *std::max_element(row, row + classes);
    for (std::size_t k = 0; k < classes; ++k) expv[k] = ar.exp(ar.sub(row[k], mx));
    const T total = reduce_sum(std::span<const T>(expv), half);
    per_sample[b] = ar.sub(ar.add(mx, ar.log(total)), row[labels[b]]);
    for (std::size_t k = 0; k < classes; ++k) probs[b * classes + k] = ar.div(expv[k], total);
  }
  Tensor<T> out({1}, logits.value().storage());
  out[0] = ar.div(reduce_sum(std::span<const T>(per_sample), half), static_cast<T>(batch));
  std::vector<int> owned(labels.begin(), labels.end());
  return logits.tape().record(
      std::move(out), {logits}, [probs = std::move(probs), owned = std::move(owned), ar, batch, classes](Node<T>& n) {
        Tensor<T> g = probs;
        const T upstream = ar.div(n.grad[0], static_cast<T>(batch));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t k = 0; k < classes; ++k) {
            T d = g[b * classes + k];
            if (static_cast<int>(k) == owned[b]) d = ar.sub(d, T(1));
            g[b * classes + k] = ar.mul(d, upstream);
          }
        }
        n.inputs[0]->accumulate(g);
      });
}

}  // namespace ca3d
