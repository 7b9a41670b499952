#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"

namespace nhgnet {

/// 30-channel montage used by the default synthetic dataset.
inline const std::vector<std::string>& default_channel_names() {
  static const std::vector<std::string> names{
      "FP1", "FP2", "F7",  "F3",  "FZ",  "F4",  "F8",  "FT7", "FC3", "FCZ",
      "FC4", "FT8", "T3",  "C3",  "CZ",  "C4",  "T4",  "TP7", "CP3", "CPZ",
      "CP4", "TP8", "T5",  "P3",  "PZ",  "P4",  "T6",  "O1",  "OZ",  "O2"};
  return names;
}

struct BandSpec {
  double lo_hz = 8.0;
  double hi_hz = 12.0;
  std::vector<std::string> channels;
  double amplitude = 1.0;
};

struct SynthConfig {
  std::vector<std::string> channel_names = default_channel_names();
  double epoch_len_s = 3.0;
  double fs = 128.0;
  std::size_t epochs_per_class = 100;  // per subject
  std::size_t n_subjects = 1;
  // Indexed by Label: vigilance = frontal beta, fatigue = central/parietal alpha.
  std::array<BandSpec, kNumClasses> bands{
      BandSpec{18.0, 24.0, {"FP1", "FP2", "F3", "FZ", "F4"}, 1.0},
      BandSpec{8.0, 12.0, {"C3", "CZ", "C4", "CP3", "CPZ", "CP4", "P3", "PZ", "P4"}, 1.0}};
  double noise_level = 1.0;  // std of the 1/f background
  std::uint64_t seed = 1;

  std::size_t epoch_samples() const {
    return static_cast<std::size_t>(std::llround(epoch_len_s * fs));
  }

  void validate() const {
    if (channel_names.empty()) throw ConfigError("synth: no channels");
    if (!(fs > 0)) throw ConfigError("synth: fs must be positive");
    if (epoch_samples() == 0) throw ConfigError("synth: epoch length rounds to zero samples");
    if (epochs_per_class == 0 || n_subjects == 0) {
      throw ConfigError("synth: epochs_per_class and n_subjects must be >= 1");
    }
    if (noise_level < 0) throw ConfigError("synth: noise_level must be >= 0");
    for (const auto& b : bands) {
      if (!(b.lo_hz > 0 && b.hi_hz >= b.lo_hz && b.hi_hz < fs / 2)) {
        throw ConfigError("synth: band [" + std::to_string(b.lo_hz) + ", " +
                          std::to_string(b.hi_hz) + "] Hz must lie in (0, fs/2 = " +
                          std::to_string(fs / 2) + ")");
      }
      for (const auto& ch : b.channels) {
        if (std::find(channel_names.begin(), channel_names.end(), ch) == channel_names.end()) {
          throw ConfigError("synth: target channel " + ch + " not in montage");
        }
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const BandSpec& b) {
  j = {{"lo_hz", b.lo_hz}, {"hi_hz", b.hi_hz}, {"channels", b.channels}, {"amplitude", b.amplitude}};
}

inline void from_json(const nlohmann::json& j, BandSpec& b) {
  b.lo_hz = j.value("lo_hz", b.lo_hz);
  b.hi_hz = j.value("hi_hz", b.hi_hz);
  b.channels = j.value("channels", b.channels);
  b.amplitude = j.value("amplitude", b.amplitude);
}

namespace detail {

/// Pink (1/f) noise from white Gaussian input via Kellet's filter bank,
/// standardised to zero mean and unit std.
template <typename Rng>
std::vector<double> pink_noise(std::size_t n, Rng& rng) {
  std::normal_distribution<double> white(0.0, 1.0);
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  auto next = [&] {
    const double w = white(rng);
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    const double out = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
    b6 = w * 0.115926;
    return out;
  };
  for (int i = 0; i < 512; ++i) next();  // settle the slow poles
  std::vector<double> v(n);
  double mean = 0;
  for (auto& x : v) {
    x = next();
    mean += x;
  }
  mean /= static_cast<double>(n);
  double var = 0;
  for (auto& x : v) {
    x -= mean;
    var += x * x;
  }
  const double sd = std::sqrt(var / static_cast<double>(n));
  if (sd > 0) for (auto& x : v) x /= sd;
  return v;
}

}  // namespace detail

/// Two-class synthetic EEG. Each epoch is 1/f background noise plus, on the
/// class's target channels, a sinusoid with frequency drawn uniformly from
/// the class band and a random phase. Subjects get a fixed random gain per
/// channel. Epochs of one subject are contiguous (vigilance block, then
/// fatigue block) and ids follow the subject/r<rec>/e<window> scheme, so the
/// dataset round-trips through save_dataset/load_dataset.
inline EpochedDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t N = cfg.channel_names.size(), T = cfg.epoch_samples();
  EpochedDataset ds;
  ds.channel_names = cfg.channel_names;
  ds.fs = cfg.fs;
  ds.epoch_samples = T;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::array<std::vector<bool>, kNumClasses> target;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    target[c].assign(N, false);
    for (const auto& name : cfg.bands[c].channels) {
      auto it = std::find(cfg.channel_names.begin(), cfg.channel_names.end(), name);
      target[c][static_cast<std::size_t>(it - cfg.channel_names.begin())] = true;
    }
  }

  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    const std::string subject = "sub" + std::to_string(s + 1);
    std::vector<double> gain(N, 1.0);
    if (cfg.n_subjects > 1) {
      for (auto& g : gain) g = 0.8 + 0.4 * unit(rng);
    }
    std::size_t window = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto& band = cfg.bands[c];
      for (std::size_t k = 0; k < cfg.epochs_per_class; ++k) {
        EegEpoch e;
        e.label = static_cast<Label>(c);
        e.subject_id = subject;
        e.epoch_id = subject + "/r" + std::to_string(s) + "/e" + std::to_string(window++);
        e.data.assign(N * T, 0.0f);
        for (std::size_t ch = 0; ch < N; ++ch) {
          std::vector<double> x(T, 0.0);
          if (cfg.noise_level > 0) {
            auto noise = detail::pink_noise(T, rng);
            for (std::size_t t = 0; t < T; ++t) x[t] = cfg.noise_level * noise[t];
          }
          if (target[c][ch]) {
            const double f = band.lo_hz + (band.hi_hz - band.lo_hz) * unit(rng);
            const double phase = 2 * std::numbers::pi * unit(rng);
            for (std::size_t t = 0; t < T; ++t) {
              x[t] += band.amplitude *
                      std::sin(2 * std::numbers::pi * f * static_cast<double>(t) / cfg.fs + phase);
            }
          }
          for (std::size_t t = 0; t < T; ++t) {
            e.data[ch * T + t] = static_cast<float>(gain[ch] * x[t]);
          }
        }
        ds.epochs.push_back(std::move(e));
      }
    }
  }
  ds.recount();
  return ds;
}

}  // namespace nhgnet
