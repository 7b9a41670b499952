#pragma once

#include <cmath>
#include <numbers>

#include "nhgnet/eeg_data.hpp"

namespace nhgnet {

namespace detail {

inline constexpr double kKaiserBeta = 8.0;
inline constexpr double kTapsPerPhase = 64.0;

inline double kaiser(double u, double beta) {
  if (std::abs(u) > 1.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - u * u)) /
         std::cyl_bessel_i(0.0, beta);
}

inline double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace detail

/// Band-limited resampling with a Kaiser-windowed sinc (beta 8). The filter
/// spans 64 samples at the lower of the two rates, i.e. 64 taps per
/// polyphase branch; the cutoff sits at the lower Nyquist frequency. Each
/// output sample evaluates the prototype filter at its exact input-time
/// offset, which is the polyphase sum for rational ratios. Zero-extended at
/// the edges. Output length round(L * target_fs / fs).
inline EegRecording resample(const EegRecording& rec, double target_fs) {
  if (!(target_fs > 0)) throw ConfigError("resample: target fs must be positive");
  rec.validate();
  if (target_fs == rec.fs) return rec;
  const double ratio = target_fs / rec.fs;
  const double band = std::min(1.0, ratio);       // cutoff relative to input Nyquist
  const double half_width = detail::kTapsPerPhase / 2.0 / band;  // in input samples
  const std::size_t L = rec.n_samples;
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(L) * ratio));
  EegRecording out;
  out.channel_names = rec.channel_names;
  out.subject_id = rec.subject_id;
  out.fs = target_fs;
  out.n_samples = out_len;
  out.samples.assign(rec.n_channels() * out_len, 0.0f);

  std::vector<double> taps;
  for (std::size_t n = 0; n < out_len; ++n) {
    const double t = static_cast<double>(n) / ratio;  // position in input samples
    const long k0 = std::max(0L, static_cast<long>(std::ceil(t - half_width)));
    const long k1 = std::min(static_cast<long>(L) - 1, static_cast<long>(std::floor(t + half_width)));
    taps.clear();
    for (long k = k0; k <= k1; ++k) {
      const double tau = t - static_cast<double>(k);
      taps.push_back(band * detail::sinc(band * tau) *
                     detail::kaiser(tau / half_width, detail::kKaiserBeta));
    }
    for (std::size_t c = 0; c < rec.n_channels(); ++c) {
      const float* x = rec.samples.data() + c * L;
      double acc = 0.0;
      for (long k = k0; k <= k1; ++k) acc += taps[static_cast<std::size_t>(k - k0)] * x[k];
      out.samples[c * out_len + n] = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace nhgnet
