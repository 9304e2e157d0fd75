// Numeric-mode machinery: pre-parameter training (w = theta / T with
// grad_theta = T * grad_w), plain SGD, training-health counters and static
// post-training quantization. Fake quantization for QAT lives in ops.hpp.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ca3d/model.hpp"

namespace ca3d {

/// Per-step observability of binary16 range problems.
struct TrainingHealth {
  std::uint64_t overflow_count = 0;
  std::uint64_t underflow_to_zero_count = 0;
  std::uint64_t nan_count = 0;
  double grad_norm = 0.0;

  void reset() { *this = TrainingHealth{}; }

  TrainingHealth& operator+=(const TrainingHealth& o) {
    overflow_count += o.overflow_count;
    underflow_to_zero_count += o.underflow_to_zero_count;
    nan_count += o.nan_count;
    grad_norm = std::max(grad_norm, o.grad_norm);
    return *this;
  }
};

namespace detail {

/// Rounds (when half) and records what the rounding did to a finite value.
template <class T>
T round_observed(T exact, bool half, TrainingHealth* health) {
  if (!half) return exact;
  const T r = f16_round(exact);
  if (health != nullptr && std::isfinite(exact)) {
    if (std::isinf(r)) ++health->overflow_count;
    if (r == T(0) && exact != T(0)) ++health->underflow_to_zero_count;
  }
  return r;
}

/// Non-finite gradient coordinates are zeroed and counted.
template <class T>
T sanitize(T g, TrainingHealth* health) {
  if (std::isfinite(g)) return g;
  if (health != nullptr) {
    if (std::isnan(g)) {
      ++health->nan_count;
    } else {
      ++health->overflow_count;
    }
  }
  return T(0);
}

inline void check_scale(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw std::invalid_argument("scale constant T must be positive and finite");
}

}  // namespace detail

/// w = theta / T, rounded onto binary16 when `half`.
template <class T>
Tensor<T> map_preparams(const Tensor<T>& theta, double scale_t, bool half, TrainingHealth* health = nullptr) {
  detail::check_scale(scale_t);
  const T t = half ? f16_round(static_cast<T>(scale_t)) : static_cast<T>(scale_t);
  Tensor<T> w(theta.shape(), half ? Storage::half : Storage::full);
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = detail::round_observed(theta[i] / t, half, health);
  return w;
}

/// grad_theta = T * grad_w, rounded onto binary16 when `half`.
template <class T>
Tensor<T> backmap_grads(const Tensor<T>& grad_w, double scale_t, bool half, TrainingHealth* health = nullptr) {
  detail::check_scale(scale_t);
  const T t = half ? f16_round(static_cast<T>(scale_t)) : static_cast<T>(scale_t);
  Tensor<T> g(grad_w.shape(), half ? Storage::half : Storage::full);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    g[i] = detail::round_observed(t * detail::sanitize(grad_w[i], health), half, health);
  }
  return g;
}

struct SgdHyper {
  double lr = 0.01;
  double momentum = 0.0;
  double clip_norm = 0.0;  // global gradient-norm cap, 0 = off

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0");
  }
};

namespace detail {

// v <- mu * v + g; x <- x - lr * v (each result rounded when half).
template <class T>
void sgd_update(std::span<T> x, std::span<const T> g, std::span<T> velocity, const SgdHyper& hp, bool half,
                TrainingHealth* health) {
  const T lr = half ? f16_round(static_cast<T>(hp.lr)) : static_cast<T>(hp.lr);
  const T mu = half ? f16_round(static_cast<T>(hp.momentum)) : static_cast<T>(hp.momentum);
  for (std::size_t i = 0; i < x.size(); ++i) {
    T step_dir = g[i];
    if (hp.momentum > 0.0) {
      velocity[i] = round_observed(round_observed(mu * velocity[i], half, nullptr) + g[i], half, health);
      step_dir = velocity[i];
    }
    const T delta = round_observed(lr * step_dir, half, health);
    x[i] = round_observed(x[i] - delta, half, health);
  }
}

}  // namespace detail

/// Pre-parameters theta (the optimization variables) and the weights they
/// generate, w = theta / T.
template <class T>
struct PreParamStore {
  std::vector<Tensor<T>> theta;
  std::vector<Tensor<T>> w;
  std::vector<Tensor<T>> velocity;
  double scale_t = 0.1;
  bool half = true;

  /// theta = w * T for the given starting weights, then w is re-materialized.
  static PreParamStore from_weights(const std::vector<Tensor<T>>& weights, double scale_t, bool half) {
    detail::check_scale(scale_t);
    PreParamStore s;
    s.scale_t = scale_t;
    s.half = half;
    const T t = half ? f16_round(static_cast<T>(scale_t)) : static_cast<T>(scale_t);
    for (const Tensor<T>& wt : weights) {
      Tensor<T> th(wt.shape(), half ? Storage::half : Storage::full);
      for (std::size_t i = 0; i < th.numel(); ++i) th[i] = half ? f16_round(wt[i] * t) : wt[i] * t;
      s.theta.push_back(std::move(th));
      s.velocity.push_back(Tensor<T>(wt.shape(), half ? Storage::half : Storage::full));
    }
    s.refresh();
    return s;
  }

  void refresh(TrainingHealth* health = nullptr) {
    w.clear();
    for (const Tensor<T>& th : theta) w.push_back(map_preparams(th, scale_t, half, health));
  }
};

/// One optimizer step on the pre-parameters: grad_theta = T * grad_w, SGD on
/// theta, then w = theta / T.
template <class T>
void sgd_step_preparam(PreParamStore<T>& store, const std::vector<Tensor<T>>& grad_w, const SgdHyper& hp,
                       TrainingHealth* health = nullptr) {
  hp.validate();
  if (grad_w.size() != store.theta.size()) throw std::invalid_argument("sgd_step_preparam: gradient count mismatch");
  for (std::size_t k = 0; k < grad_w.size(); ++k) {
    const Tensor<T> g = backmap_grads(grad_w[k], store.scale_t, store.half, health);
    detail::sgd_update(store.theta[k].data(), g.data(), store.velocity[k].data(), hp, store.half, health);
  }
  store.refresh(health);
}

/// Plain SGD directly on the weights.
template <class T>
void sgd_step_plain(std::vector<Tensor<T>>& w, const std::vector<Tensor<T>>& grad_w, std::vector<Tensor<T>>& velocity,
                    const SgdHyper& hp, bool half, TrainingHealth* health = nullptr) {
  hp.validate();
  if (velocity.size() != w.size()) {
    velocity.clear();
    for (const Tensor<T>& x : w) velocity.push_back(Tensor<T>::zeros_like(x));
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    Tensor<T> g = grad_w[k];
    for (T& v : g.data()) v = detail::sanitize(v, health);
    detail::sgd_update(w[k].data(), std::span<const T>(g.data()), velocity[k].data(), hp, half, health);
  }
}

/// Drives a model's parameters according to its numeric mode: plain SGD on
/// the weights (full32, qat, static, naive binary16) or SGD on
/// pre-parameters (pure16_preparam).
template <class T>
class ModelOptimizer {
 public:
  ModelOptimizer(Ca3dModel<T>& model, SgdHyper hp) : hp_(hp) {
    hp_.validate();
    const NumericMode& m = model.mode();
    half_ = model.storage() == Storage::half;
    if (m.kind == ModeKind::pure16_preparam) {
      std::vector<Tensor<T>> weights;
      for (const Parameter<T>& p : model.parameters()) weights.push_back(p.value);
      store_ = PreParamStore<T>::from_weights(weights, m.scale_t, half_);
      write_back(model);
    }
  }

  bool uses_preparams() const { return !store_.theta.empty(); }
  const PreParamStore<T>& store() const { return store_; }

  void step(Ca3dModel<T>& model, TrainingHealth& health) {
    std::vector<Tensor<T>> grads;
    double norm2 = 0.0;
    for (Parameter<T>& p : model.parameters()) {
      if (p.grad.empty()) p.zero_grad();
      for (T g : p.grad.data()) {
        if (std::isfinite(g)) norm2 += static_cast<double>(g) * static_cast<double>(g);
      }
      grads.push_back(p.grad);
    }
    health.grad_norm = std::sqrt(norm2);
    if (hp_.clip_norm > 0.0 && health.grad_norm > hp_.clip_norm) {
      const T f = static_cast<T>(hp_.clip_norm / health.grad_norm);
      for (Tensor<T>& g : grads)
        for (T& v : g.data()) v = half_ ? f16_round(v * f) : v * f;
    }
    if (uses_preparams()) {
      sgd_step_preparam(store_, grads, hp_, &health);
      write_back(model);
      return;
    }
    std::vector<Tensor<T>> weights;
    for (Parameter<T>& p : model.parameters()) weights.push_back(std::move(p.value));
    sgd_step_plain(weights, grads, velocity_, hp_, half_, &health);
    for (std::size_t k = 0; k < weights.size(); ++k) model.parameters()[k].value = std::move(weights[k]);
  }

 private:
  void write_back(Ca3dModel<T>& model) const {
    for (std::size_t k = 0; k < store_.w.size(); ++k) model.parameters()[k].value = store_.w[k];
  }

  SgdHyper hp_;
  bool half_ = false;
  PreParamStore<T> store_;
  std::vector<Tensor<T>> velocity_;
};

class QuantizationRangeError : public std::runtime_error {
 public:
  QuantizationRangeError(const std::string& what, std::vector<std::string> names)
      : std::runtime_error(what), offending_(std::move(names)) {}
  const std::vector<std::string>& offending() const { return offending_; }

 private:
  std::vector<std::string> offending_;
};

/// Converts a full-precision model to binary16 parameters and arithmetic.
/// Fails if any parameter is non-finite or rounds outside the finite range.
template <class T>
Ca3dModel<T> static_quantize_model(const Ca3dModel<T>& model) {
  std::vector<std::string> bad;
  auto out_of_range = [](const Tensor<T>& t) {
    for (T v : t.data()) {
      if (!std::isfinite(v) || std::isinf(f16_round(v))) return true;
    }
    return false;
  };
  for (const Parameter<T>& p : model.parameters()) {
    if (out_of_range(p.value)) bad.push_back(p.name);
  }
  for (const auto& [name, s] : model.norm_states()) {
    if (out_of_range(s.running_mean) || out_of_range(s.running_var)) bad.push_back(name + ".running_stats");
  }
  if (!bad.empty()) {
    std::string list;
    for (const std::string& n : bad) list += (list.empty() ? "" : ", ") + n;
    throw QuantizationRangeError("parameters outside the binary16 finite range: " + list, bad);
  }
  Ca3dModel<T> q = model;
  q.set_storage(Storage::half);
  return q;
}

}  // namespace ca3d
