#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>

// Branch-free single-precision exp/log/tanh (Cephes polynomials) that the
// compiler can vectorize. Accurate to a few float ulp. Double precision
// always goes through <cmath>.

namespace nhgnet::detail {

inline float exp_f32(float x) {
  x = std::min(std::max(x, -87.3f), 88.3f);
  const float fx = x * 1.44269504088896341f;
  const float n = (fx + 12582912.0f) - 12582912.0f;  // round to nearest
  float r = x - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const auto e = static_cast<std::int32_t>(n) + 127;
  return y * std::bit_cast<float>(e << 23);
}

/// Natural log for positive normal inputs.
inline float log_f32(float x) {
  const auto bits = std::bit_cast<std::int32_t>(x);
  float e = static_cast<float>(((bits >> 23) & 0xff) - 126);
  float m = std::bit_cast<float>((bits & 0x807fffff) | 0x3f000000);  // [0.5, 1)
  const bool small = m < 0.707106781186547524f;
  e = small ? e - 1.0f : e;
  m = small ? m + m - 1.0f : m - 1.0f;
  const float z = m * m;
  float y = 7.0376836292e-2f;
  y = y * m - 1.1514610310e-1f;
  y = y * m + 1.1676998740e-1f;
  y = y * m - 1.2420140846e-1f;
  y = y * m + 1.4249322787e-1f;
  y = y * m - 1.6668057665e-1f;
  y = y * m + 2.0000714765e-1f;
  y = y * m - 2.4999993993e-1f;
  y = y * m + 3.3333331174e-1f;
  y = y * m * z;
  y += -2.12194440e-4f * e;
  y += -0.5f * z;
  return (m + y) + 0.693359375f * e;
}

inline float tanh_f32(float x) {
  const float a = std::abs(x);
  const float z = x * x;
  float p = -5.70498872745e-3f;
  p = p * z + 2.06390887954e-2f;
  p = p * z - 5.37397155531e-2f;
  p = p * z + 1.33314422036e-1f;
  p = p * z - 3.33332819422e-1f;
  const float near_zero = p * z * x + x;
  const float far = 1.0f - 2.0f / (exp_f32(2.0f * a) + 1.0f);
  return a < 0.625f ? near_zero : std::copysign(far, x);
}

template <typename T>
T fast_exp(T x) {
  if constexpr (std::is_same_v<T, float>) return exp_f32(x);
  else return std::exp(x);
}

template <typename T>
T fast_log(T x) {
  if constexpr (std::is_same_v<T, float>) return log_f32(x);
  else return std::log(x);
}

/// Largest value below one.
template <typename T>
inline constexpr T below_one = T(1) - std::numeric_limits<T>::epsilon() / 2;

/// tanh kept inside the open interval (-1, 1).
template <typename T>
T fast_tanh(T x) {
  const T y = [x] {
    if constexpr (std::is_same_v<T, float>) return tanh_f32(x);
    else return std::tanh(x);
  }();
  return std::clamp(y, -below_one<T>, below_one<T>);
}

/// Numerically stable logistic function, kept inside (0, 1).
template <typename T>
T fast_sigmoid(T x) {
  const T e = fast_exp(-std::abs(x));
  const T pos = T(1) / (T(1) + e);
  return std::clamp(x >= T(0) ? pos : e * pos, std::numeric_limits<T>::min(), below_one<T>);
}

}  // namespace nhgnet::detail
