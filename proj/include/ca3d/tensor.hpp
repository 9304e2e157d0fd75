// Dense N-dimensional tensors with a storage-precision tag.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ca3d/half.hpp"

namespace ca3d {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Where a tensor's values live: ordinary working precision, or the binary16 grid.
enum class Storage : unsigned char { full, half };

enum class ModeKind : unsigned char { full32, qat, pure16_preparam, pure16_naive, static_post_quant };

/// Numeric regime for training and inference.
struct NumericMode {
  ModeKind kind = ModeKind::full32;
  double scale_t = 1.0;  // pre-parameter constant; only meaningful for pure16_preparam

  static NumericMode full32() { return {ModeKind::full32, 1.0}; }
  static NumericMode qat() { return {ModeKind::qat, 1.0}; }
  static NumericMode pure16(double t) { return {ModeKind::pure16_preparam, t}; }
  static NumericMode pure16_naive() { return {ModeKind::pure16_naive, 1.0}; }
  static NumericMode static_post_quant() { return {ModeKind::static_post_quant, 1.0}; }

  /// True when training itself runs on binary16 storage and arithmetic.
  bool trains_in_half() const {
    return kind == ModeKind::pure16_preparam || kind == ModeKind::pure16_naive;
  }
  Storage training_storage() const { return trains_in_half() ? Storage::half : Storage::full; }

  void validate() const {
    if (!(scale_t > 0.0) || !std::isfinite(scale_t)) {
      throw std::invalid_argument("scale constant T must be positive and finite");
    }
  }

  friend bool operator==(const NumericMode&, const NumericMode&) = default;
};

inline std::string to_string(ModeKind kind) {
  switch (kind) {
    case ModeKind::full32: return "full32";
    case ModeKind::qat: return "qat";
    case ModeKind::pure16_preparam: return "f16";
    case ModeKind::pure16_naive: return "f16-naive";
    case ModeKind::static_post_quant: return "static";
  }
  return "?";
}

inline ModeKind parse_mode_kind(const std::string& name) {
  if (name == "full32") return ModeKind::full32;
  if (name == "qat") return ModeKind::qat;
  if (name == "f16") return ModeKind::pure16_preparam;
  if (name == "f16-naive") return ModeKind::pure16_naive;
  if (name == "static") return ModeKind::static_post_quant;
  throw std::invalid_argument("unknown numeric mode '" + name + "'");
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, Storage storage = Storage::full)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)), storage_(storage) {
    check_shape();
  }

  /// Values are rounded onto the binary16 grid when `storage` is half.
  Tensor(Shape shape, std::vector<T> data, Storage storage = Storage::full)
      : shape_(std::move(shape)), data_(std::move(data)), storage_(storage) {
    check_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
    if (storage_ == Storage::half) f16_round_inplace(std::span<T>(data_));
  }

  static Tensor filled(Shape shape, T value, Storage storage = Storage::full) {
    Tensor t(std::move(shape), storage);
    std::fill(t.data_.begin(), t.data_.end(), storage == Storage::half ? f16_round(value) : value);
    return t;
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, other.storage_); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Storage storage() const { return storage_; }
  bool is_half() const { return storage_ == Storage::half; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Converts to the given storage; moving to half rounds every element.
  Tensor to_storage(Storage storage) const {
    Tensor out = *this;
    out.storage_ = storage;
    if (storage == Storage::half) f16_round_inplace(std::span<T>(out.data_));
    return out;
  }

  /// Re-applies the storage invariant after raw writes through data().
  void enforce_storage() {
    if (storage_ == Storage::half) f16_round_inplace(std::span<T>(data_));
  }

  bool storage_invariant_holds() const {
    if (storage_ == Storage::full) return true;
    return std::all_of(data_.begin(), data_.end(), [](T v) { return is_half_representable(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, storage_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw std::invalid_argument("tensor dimensions must be positive: " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  Storage storage_ = Storage::full;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace ca3d
