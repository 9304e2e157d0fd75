// Software emulation of IEEE 754 binary16 storage and arithmetic.
//
// Values stay in float/double registers; "rounding through binary16" means
// replacing a value with the nearest binary16 value (ties to even), with
// overflow to infinity and gradual underflow through the subnormals.
// Rounding a float or double is exact-then-round: binary16 has 11 significand
// bits, so float (24 bits) carries every sum, difference, product and quotient
// of two binary16 operands without harmful double rounding.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace ca3d {

inline constexpr double kHalfMax = 65504.0;
inline constexpr double kHalfMinNormal = 6.103515625e-05;        // 2^-14
inline constexpr double kHalfMinSubnormal = 5.9604644775390625e-08;  // 2^-24

/// Decodes a binary16 bit pattern.
inline double half_bits_to_double(std::uint16_t bits) {
  const int sign = (bits >> 15) & 1;
  const int exponent = (bits >> 10) & 0x1f;
  const int mantissa = bits & 0x3ff;
  double magnitude;
  if (exponent == 0) {
    magnitude = std::ldexp(static_cast<double>(mantissa), -24);
  } else if (exponent == 31) {
    magnitude = mantissa == 0 ? std::numeric_limits<double>::infinity()
                              : std::numeric_limits<double>::quiet_NaN();
  } else {
    magnitude = std::ldexp(static_cast<double>(mantissa | 0x400), exponent - 25);
  }
  return sign ? -magnitude : magnitude;
}

/// Round-to-nearest-even onto the binary16 grid, computed in double.
inline double f16_round(double x) {
  if (std::isnan(x) || std::isinf(x) || x == 0.0) return x;
  const double a = std::fabs(x);
  double r;
  if (a < kHalfMinNormal) {
    r = std::nearbyint(a * 16777216.0) / 16777216.0;
  } else {
    int e2 = 0;
    std::frexp(a, &e2);  // a = m * 2^e2, m in [0.5, 1)
    const int quantum_exp = (e2 - 1) - 10;
    r = std::ldexp(std::nearbyint(std::ldexp(a, -quantum_exp)), quantum_exp);
  }
  if (r > kHalfMax) r = std::numeric_limits<double>::infinity();
  return std::copysign(r, x);
}

#if defined(__F16C__)
inline float f16_round(float x) {
  return _cvtsh_ss(_cvtss_sh(x, _MM_FROUND_TO_NEAREST_INT));
}
#else
inline float f16_round(float x) {
  return static_cast<float>(f16_round(static_cast<double>(x)));
}
#endif

/// Encodes an already-representable (or arbitrary, which is rounded) value.
inline std::uint16_t double_to_half_bits(double x) {
  const double r = f16_round(x);
  const std::uint16_t sign = std::signbit(r) ? 0x8000 : 0;
  const double a = std::fabs(r);
  if (std::isnan(r)) return sign | 0x7e00;
  if (std::isinf(r)) return sign | 0x7c00;
  if (a == 0.0) return sign;
  if (a < kHalfMinNormal) {
    return sign | static_cast<std::uint16_t>(std::ldexp(a, 24));
  }
  int e2 = 0;
  std::frexp(a, &e2);
  const int exponent = e2 - 1 + 15;
  const auto mantissa = static_cast<std::uint16_t>(std::ldexp(a, 10 - (e2 - 1)) - 1024.0);
  return sign | static_cast<std::uint16_t>(exponent << 10) | mantissa;
}

template <class T>
inline bool is_half_representable(T x) {
  return std::isnan(x) || f16_round(x) == x;
}

/// Rounds every element in place.
inline void f16_round_inplace(std::span<float> values) {
  std::size_t i = 0;
#if defined(__F16C__) && defined(__AVX__)
  for (; i + 8 <= values.size(); i += 8) {
    const __m256 v = _mm256_loadu_ps(values.data() + i);
    _mm256_storeu_ps(values.data() + i,
                     _mm256_cvtph_ps(_mm256_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT)));
  }
#endif
  for (; i < values.size(); ++i) values[i] = f16_round(values[i]);
}

inline void f16_round_inplace(std::span<double> values) {
  for (double& v : values) v = f16_round(v);
}

/// Arithmetic that optionally rounds every result through binary16.
template <class T>
struct Arith {
  bool half = false;

  T round(T x) const { return half ? f16_round(x) : x; }
  T add(T a, T b) const { return round(a + b); }
  T sub(T a, T b) const { return round(a - b); }
  T mul(T a, T b) const { return round(a * b); }
  T div(T a, T b) const { return round(a / b); }
  /// acc + a*b with the product rounded before the sum.
  T mac(T acc, T a, T b) const { return half ? round(acc + round(a * b)) : acc + a * b; }
  T exp(T x) const { return round(std::exp(x)); }
  T log(T x) const { return round(std::log(x)); }
  T sqrt(T x) const { return round(std::sqrt(x)); }
};

}  // namespace ca3d
