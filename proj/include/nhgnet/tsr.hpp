#pragma once

#include <random>
#include <string>

#include "nhgnet/eeg_data.hpp"

namespace nhgnet {

struct TsrOptions {
  std::size_t n_segments = 8;
  std::size_t multiplier = 5;
  // true: output holds multiplier x the input per class (originals included).
  // false: multiplier x recombined epochs are added on top of the originals.
  bool multiplier_is_total = true;
};

/// Temporal segmentation and recombination. Each epoch is cut into
/// n_segments equal slots; a recombined epoch fills slot k with slot k of a
/// uniformly drawn original of the same class. Originals come first (in
/// input order), then recombined epochs class by class.
///
/// If T is not a multiple of n_segments every epoch is truncated to the
/// largest multiple and `truncated_from` records the original length.
template <typename Rng>
EpochedDataset tsr_augment(const EpochedDataset& train, const TsrOptions& opts, Rng& rng) {
  if (opts.n_segments == 0) throw ConfigError("tsr: n_segments must be >= 1");
  if (opts.multiplier == 0) throw ConfigError("tsr: multiplier must be >= 1");
  const std::size_t N = train.n_channels();
  const std::size_t T = train.epoch_samples;
  const std::size_t seg = T / opts.n_segments;
  const std::size_t Tk = seg * opts.n_segments;
  if (seg == 0) throw ConfigError("tsr: epoch shorter than the segment count");

  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < train.epochs.size(); ++i) {
    by_class[static_cast<int>(train.epochs[i].label)].push_back(i);
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].size() < 2) {
      throw DataError("tsr: class " + label_name(static_cast<Label>(c)) + " has " +
                      std::to_string(by_class[c].size()) + " epochs, need at least 2");
    }
  }

  auto truncated = [&](const EegEpoch& e) {
    if (Tk == T) return e;
    EegEpoch t = e;
    t.data.resize(N * Tk);
    for (std::size_t ch = 0; ch < N; ++ch) {
      std::copy_n(e.data.begin() + static_cast<long>(ch * T), Tk,
                  t.data.begin() + static_cast<long>(ch * Tk));
    }
    return t;
  };

  EpochedDataset out;
  out.channel_names = train.channel_names;
  out.fs = train.fs;
  out.epoch_samples = Tk;
  out.truncated_from = Tk == T ? train.truncated_from : std::optional<std::size_t>(T);
  for (const auto& e : train.epochs) out.epochs.push_back(truncated(e));

  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& donors = by_class[c];
    const std::size_t extra = opts.multiplier_is_total ? (opts.multiplier - 1) * donors.size()
                                                       : opts.multiplier * donors.size();
    std::uniform_int_distribution<std::size_t> pick(0, donors.size() - 1);
    for (std::size_t n = 0; n < extra; ++n) {
      EegEpoch e;
      e.label = static_cast<Label>(c);
      e.augmented = true;
      e.subject_id = train.epochs[donors[0]].subject_id;
      e.epoch_id = "tsr/" + label_name(e.label) + "/" + std::to_string(n);
      e.data.resize(N * Tk);
      for (std::size_t k = 0; k < opts.n_segments; ++k) {
        const auto& src = train.epochs[donors[pick(rng)]].data;
        for (std::size_t ch = 0; ch < N; ++ch) {
          std::copy_n(src.begin() + static_cast<long>(ch * T + k * seg), seg,
                      e.data.begin() + static_cast<long>(ch * Tk + k * seg));
        }
      }
      out.epochs.push_back(std::move(e));
    }
  }
  out.recount();
  return out;
}

}  // namespace nhgnet
