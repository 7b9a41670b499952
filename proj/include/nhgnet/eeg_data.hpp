#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nhgnet/errors.hpp"

namespace nhgnet {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

enum class Label : int { vigilance = 0, fatigue = 1 };

inline constexpr std::size_t kNumClasses = 2;

inline std::string label_name(Label l) {
  return l == Label::fatigue ? "fatigue" : "vigilance";
}

inline Label parse_label(const nlohmann::json& j) {
  if (j.is_number_integer()) {
    int v = j.get<int>();
    if (v == 0 || v == 1) return static_cast<Label>(v);
  } else if (j.is_string()) {
    auto s = j.get<std::string>();
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    if (s == "vigilance" || s == "0") return Label::vigilance;
    if (s == "fatigue" || s == "1") return Label::fatigue;
  }
  throw DataError("unknown label: " + j.dump());
}

/// Continuous multichannel recording. Samples are channel-major:
/// samples[c * n_samples + t].
struct EegRecording {
  std::vector<std::string> channel_names;
  double fs = 0.0;
  std::size_t n_samples = 0;
  std::vector<float> samples;
  std::string subject_id;

  std::size_t n_channels() const { return channel_names.size(); }

  void validate() const {
    if (channel_names.empty()) throw DataError("recording has no channels");
    if (n_samples == 0) throw DataError("recording has no samples");
    if (!(fs > 0)) throw DataError("recording fs must be positive");
    if (samples.size() != channel_names.size() * n_samples) {
      throw DataError("recording sample count does not match N x L");
    }
    std::set<std::string> uniq(channel_names.begin(), channel_names.end());
    if (uniq.size() != channel_names.size()) {
      throw DataError("recording channel names are not unique");
    }
  }
};

/// One labelled window, data channel-major N x T.
struct EegEpoch {
  std::vector<float> data;
  Label label = Label::vigilance;
  std::string subject_id;
  std::string epoch_id;
  bool augmented = false;
};

struct EpochedDataset {
  std::vector<EegEpoch> epochs;
  std::vector<std::string> channel_names;
  double fs = 0.0;
  std::size_t epoch_samples = 0;
  std::array<std::size_t, kNumClasses> class_counts{};
  // Original T when TSR truncated epochs to a multiple of the segment count.
  std::optional<std::size_t> truncated_from;

  std::size_t size() const { return epochs.size(); }
  std::size_t n_channels() const { return channel_names.size(); }

  void recount() {
    class_counts = {};
    for (const auto& e : epochs) ++class_counts[static_cast<int>(e.label)];
  }

  std::vector<std::string> subjects() const {
    std::vector<std::string> out;
    for (const auto& e : epochs)
      if (std::find(out.begin(), out.end(), e.subject_id) == out.end())
        out.push_back(e.subject_id);
    return out;
  }

  /// Subset by index, preserving the given order.
  EpochedDataset subset(const std::vector<std::size_t>& idx) const {
    EpochedDataset out;
    out.channel_names = channel_names;
    out.fs = fs;
    out.epoch_samples = epoch_samples;
    out.truncated_from = truncated_from;
    out.epochs.reserve(idx.size());
    for (auto i : idx) out.epochs.push_back(epochs.at(i));
    out.recount();
    return out;
  }

  void validate() const {
    std::set<std::string> ids;
    std::array<std::size_t, kNumClasses> counts{};
    const std::size_t per_epoch = channel_names.size() * epoch_samples;
    for (const auto& e : epochs) {
      if (e.data.size() != per_epoch) {
        throw DataError("epoch " + e.epoch_id + " has " + std::to_string(e.data.size()) +
                        " values, expected " + std::to_string(per_epoch));
      }
      if (!ids.insert(e.epoch_id).second) {
        throw DataError("duplicate epoch id " + e.epoch_id);
      }
      ++counts[static_cast<int>(e.label)];
    }
    if (counts != class_counts) throw DataError("class counts out of sync with epochs");
  }
};

struct LabelInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  Label label = Label::vigilance;
};

// ---------------------------------------------------------------------------
// Sample files

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw FormatError("truncated " + what);
  }
  return v;
}

}  // namespace detail

/// Raw recording: "EEGB", u32 N, u32 L, u32 reserved, then N*L float32,
/// channel-major.
inline void write_eegb(const std::filesystem::path& path, std::size_t n_channels,
                       std::size_t n_samples, const std::vector<float>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write("EEGB", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(n_channels));
  detail::write_u32(os, static_cast<std::uint32_t>(n_samples));
  detail::write_u32(os, 0);
  os.write(reinterpret_cast<const char*>(samples.data()),
           static_cast<std::streamsize>(samples.size() * sizeof(float)));
  if (!os) throw DataError("failed writing " + path.string());
}

struct RawSamples {
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
  std::vector<float> samples;
  std::vector<std::string> header;  // CSV only
};

inline RawSamples read_eegb(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing sample file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "EEGB", 4) != 0) {
    throw FormatError(path.string() + ": bad magic, expected EEGB");
  }
  RawSamples raw;
  raw.n_channels = detail::read_u32(is, path.string());
  raw.n_samples = detail::read_u32(is, path.string());
  detail::read_u32(is, path.string());
  raw.samples.resize(raw.n_channels * raw.n_samples);
  if (!is.read(reinterpret_cast<char*>(raw.samples.data()),
               static_cast<std::streamsize>(raw.samples.size() * sizeof(float)))) {
    throw FormatError(path.string() + ": truncated sample data");
  }
  return raw;
}

/// One row per sample, one column per channel, header row of channel names.
inline RawSamples read_csv_samples(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("missing sample file " + path.string());
  RawSamples raw;
  std::string line;
  if (!std::getline(is, line)) throw DataError(path.string() + ": empty CSV");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      raw.header.push_back(cell);
    }
  }
  raw.n_channels = raw.header.size();
  std::vector<std::vector<float>> cols(raw.n_channels);
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      if (c >= raw.n_channels) throw DataError(path.string() + ": too many columns");
      try {
        cols[c++].push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw DataError(path.string() + ": bad number '" + cell + "'");
      }
    }
    if (c != raw.n_channels) throw DataError(path.string() + ": too few columns");
  }
  raw.n_samples = raw.n_channels ? cols[0].size() : 0;
  for (const auto& col : cols) raw.samples.insert(raw.samples.end(), col.begin(), col.end());
  return raw;
}

// ---------------------------------------------------------------------------
// Epoching

/// Cuts consecutive non-overlapping windows of epoch_len_s; the trailing
/// partial window is dropped. Every window must be covered by label
/// intervals of a single class.
inline std::vector<EegEpoch> epoch_recording(const EegRecording& rec, double epoch_len_s,
                                             const std::vector<LabelInterval>& labels,
                                             std::size_t rec_index = 0) {
  rec.validate();
  const auto win = static_cast<std::size_t>(std::llround(epoch_len_s * rec.fs));
  if (win == 0 || win > rec.n_samples) {
    throw DataError("epoch length " + std::to_string(epoch_len_s) + " s (" +
                    std::to_string(win) + " samples) does not fit recording of " +
                    std::to_string(rec.n_samples) + " samples");
  }
  struct Iv {
    long long lo, hi;
    Label label;
  };
  std::vector<Iv> ivs;
  for (const auto& l : labels) {
    ivs.push_back({std::llround(l.start_s * rec.fs), std::llround(l.end_s * rec.fs), l.label});
  }
  std::sort(ivs.begin(), ivs.end(), [](const Iv& a, const Iv& b) { return a.lo < b.lo; });

  const std::size_t n_win = rec.n_samples / win;
  const std::size_t N = rec.n_channels();
  std::vector<EegEpoch> out;
  out.reserve(n_win);
  for (std::size_t w = 0; w < n_win; ++w) {
    const long long lo = static_cast<long long>(w * win), hi = lo + static_cast<long long>(win);
    long long cursor = lo;
    std::optional<Label> label;
    for (const auto& iv : ivs) {
      if (iv.hi <= lo || iv.lo >= hi) continue;
      if (iv.lo > cursor) break;
      if (label && *label != iv.label) {
        throw DataError(rec.subject_id + ": window " + std::to_string(w) +
                        " spans intervals with different labels");
      }
      label = iv.label;
      cursor = std::max(cursor, iv.hi);
    }
    if (cursor < hi || !label) {
      throw DataError(rec.subject_id + ": unlabeled interval in window " + std::to_string(w) +
                      " [" + std::to_string(lo / rec.fs) + " s, " +
                      std::to_string(hi / rec.fs) + " s)");
    }
    EegEpoch e;
    e.label = *label;
    e.subject_id = rec.subject_id;
    e.epoch_id = rec.subject_id + "/r" + std::to_string(rec_index) + "/e" + std::to_string(w);
    e.data.resize(N * win);
    for (std::size_t c = 0; c < N; ++c) {
      std::copy_n(rec.samples.begin() + static_cast<long>(c * rec.n_samples + lo), win,
                  e.data.begin() + static_cast<long>(c * win));
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct LoadOptions {
  double epoch_len_s = 3.0;
  std::optional<double> target_fs;  // resample on load when set
};

inline EegRecording resample(const EegRecording& rec, double target_fs);

/// Reads a JSON manifest {fs, channel_names[], recordings:[{path, subject_id,
/// labels:[{start_s, end_s, class}]}]}. Paths are relative to the manifest.
/// Epochs come out in manifest order.
inline EpochedDataset load_dataset(const std::filesystem::path& manifest_path,
                                   const LoadOptions& opts = {}) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("missing manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": invalid JSON: " + e.what());
  }
  EpochedDataset ds;
  try {
    ds.fs = m.at("fs").get<double>();
    ds.channel_names = m.at("channel_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  double epoch_len = m.value("epoch_len_s", opts.epoch_len_s);
  const auto& recs = m.value("recordings", nlohmann::json::array());
  if (recs.empty()) throw DataError(manifest_path.string() + ": empty dataset (no recordings)");
  const auto base = manifest_path.parent_path();
  std::size_t index = 0;
  for (const auto& r : recs) {
    const std::filesystem::path rel = r.at("path").get<std::string>();
    const auto path = rel.is_absolute() ? rel : base / rel;
    RawSamples raw = path.extension() == ".csv" ? read_csv_samples(path) : read_eegb(path);
    if (raw.n_channels != ds.channel_names.size()) {
      throw DataError(path.string() + ": channel mismatch, recording has " +
                      std::to_string(raw.n_channels) + " channels, manifest declares " +
                      std::to_string(ds.channel_names.size()));
    }
    if (!raw.header.empty() && raw.header != ds.channel_names) {
      throw DataError(path.string() + ": CSV channel names differ from manifest");
    }
    EegRecording rec;
    rec.channel_names = ds.channel_names;
    rec.fs = ds.fs;
    rec.n_samples = raw.n_samples;
    rec.samples = std::move(raw.samples);
    rec.subject_id = r.value("subject_id", "s" + std::to_string(index));
    if (opts.target_fs && *opts.target_fs != rec.fs) rec = resample(rec, *opts.target_fs);
    std::vector<LabelInterval> labels;
    for (const auto& l : r.value("labels", nlohmann::json::array())) {
      labels.push_back({l.at("start_s").get<double>(), l.at("end_s").get<double>(),
                        parse_label(l.at("class"))});
    }
    auto epochs = epoch_recording(rec, epoch_len, labels, index);
    if (ds.epoch_samples == 0 && !epochs.empty()) ds.epoch_samples = epochs[0].data.size() / rec.n_channels();
    for (auto& e : epochs) ds.epochs.push_back(std::move(e));
    ++index;
  }
  if (opts.target_fs) ds.fs = *opts.target_fs;
  if (ds.epochs.empty()) throw DataError(manifest_path.string() + ": empty dataset");
  ds.recount();
  ds.validate();
  return ds;
}

/// Writes a dataset as a manifest plus one EEGB file per contiguous run of
/// same-subject epochs. Loading the result reproduces the epochs exactly
/// (ids follow the subject/r<rec>/e<window> scheme).
inline std::filesystem::path save_dataset(const EpochedDataset& ds,
                                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t N = ds.n_channels(), T = ds.epoch_samples;
  const double epoch_len = static_cast<double>(T) / ds.fs;
  nlohmann::json recs = nlohmann::json::array();
  std::size_t i = 0, rec_index = 0;
  while (i < ds.epochs.size()) {
    std::size_t j = i;
    while (j < ds.epochs.size() && ds.epochs[j].subject_id == ds.epochs[i].subject_id) ++j;
    const std::size_t count = j - i, L = count * T;
    std::vector<float> samples(N * L);
    nlohmann::json labels = nlohmann::json::array();
    for (std::size_t k = 0; k < count; ++k) {
      const auto& e = ds.epochs[i + k];
      for (std::size_t c = 0; c < N; ++c) {
        std::copy_n(e.data.begin() + static_cast<long>(c * T), T,
                    samples.begin() + static_cast<long>(c * L + k * T));
      }
      labels.push_back({{"start_s", static_cast<double>(k) * epoch_len},
                        {"end_s", static_cast<double>(k + 1) * epoch_len},
                        {"class", label_name(e.label)}});
    }
    const std::string file = "rec" + std::to_string(rec_index) + ".eegb";
    write_eegb(dir / file, N, L, samples);
    recs.push_back({{"path", file}, {"subject_id", ds.epochs[i].subject_id}, {"labels", labels}});
    ++rec_index;
    i = j;
  }
  nlohmann::json m = {{"fs", ds.fs},
                      {"channel_names", ds.channel_names},
                      {"epoch_len_s", epoch_len},
                      {"recordings", recs}};
  const auto path = dir / "manifest.json";
  std::ofstream os(path);
  os << m.dump(2) << '\n';
  return path;
}

}  // namespace nhgnet

#include "nhgnet/resample.hpp"
