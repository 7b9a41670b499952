#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"
#include "nhgnet/model.hpp"

namespace nhgnet {

// CSV files are RFC 4180 with LF line endings. Values are written with 17
// significant digits, so float and double values read back bit-exactly.

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Splits CSV text into records; handles quoted fields with embedded
/// separators, quotes and newlines.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      rows.push_back(std::move(row));
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline double parse_value(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number: '" + s + "'");
  }
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("failed writing " + path.string());
}

}  // namespace detail

// ------------------------------------------------------------- matrices

struct LabeledMatrix {
  std::vector<std::string> channel_names;
  std::vector<double> values;  // row-major N x N

  std::size_t size() const { return channel_names.size(); }
  double at(std::size_t r, std::size_t c) const { return values.at(r * size() + c); }
};

/// Header row ("channel", then channel names) and one labeled row
/// per channel: N + 1 lines.
inline void write_matrix_csv(const std::filesystem::path& path, const LabeledMatrix& m) {
  const std::size_t N = m.size();
  if (m.values.size() != N * N) {
    throw DimensionError("matrix csv: " + std::to_string(m.values.size()) + " values for " + std::to_string(N) +
                         " channels");
  }
  std::string out = "channel";
  for (const auto& name : m.channel_names) out += "," + detail::csv_field(name);
  out += '\n';
  for (std::size_t r = 0; r < N; ++r) {
    out += detail::csv_field(m.channel_names[r]);
    for (std::size_t c = 0; c < N; ++c) {
      const double v = m.values[r * N + c];
      if (!std::isfinite(v)) throw NumericError("matrix csv: non-finite value");
      out += "," + detail::format_value(v);
    }
    out += '\n';
  }
  detail::write_text(path, out);
}

inline LabeledMatrix read_matrix_csv(const std::filesystem::path& path) {
  auto rows = detail::parse_csv(detail::read_text(path));
  if (rows.empty() || rows[0].size() < 2) throw FormatError(path.string() + ": missing header row");
  LabeledMatrix m;
  m.channel_names.assign(rows[0].begin() + 1, rows[0].end());
  const std::size_t N = m.size();
  if (rows.size() != N + 1) {
    throw FormatError(path.string() + ": expected " + std::to_string(N + 1) + " rows, found " +
                      std::to_string(rows.size()));
  }
  for (std::size_t r = 0; r < N; ++r) {
    const auto& row = rows[r + 1];
    if (row.size() != N + 1) throw FormatError(path.string() + ": row " + std::to_string(r + 2) + " is ragged");
    if (row[0] != m.channel_names[r]) {
      throw FormatError(path.string() + ": row label " + row[0] + " does not match column " + m.channel_names[r]);
    }
    for (std::size_t c = 0; c < N; ++c) m.values.push_back(detail::parse_value(row[c + 1], path.string()));
  }
  return m;
}

// -------------------------------------------------------------- topomap

enum class Reduction { mean_abs, max_abs, rms };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "mean_abs" || s == "mean_abs_over_features") return Reduction::mean_abs;
  if (s == "max_abs") return Reduction::max_abs;
  if (s == "rms") return Reduction::rms;
  throw ConfigError("unknown reduction '" + s + "' (expected mean_abs, max_abs or rms)");
}

inline std::string reduction_name(Reduction r) {
  switch (r) {
    case Reduction::mean_abs: return "mean_abs";
    case Reduction::max_abs: return "max_abs";
    case Reduction::rms: return "rms";
  }
  return "mean_abs";
}

inline double reduce_features(std::span<const double> row, Reduction r) {
  if (row.empty()) throw DimensionError("reduce_features: no features");
  double acc = 0;
  for (double v : row) {
    switch (r) {
      case Reduction::mean_abs: acc += std::abs(v); break;
      case Reduction::max_abs: acc = std::max(acc, std::abs(v)); break;
      case Reduction::rms: acc += v * v; break;
    }
  }
  if (r == Reduction::mean_abs) return acc / double(row.size());
  if (r == Reduction::rms) return std::sqrt(acc / double(row.size()));
  return acc;
}

struct TopomapWeights {
  std::vector<double> raw;      // per-channel reduction
  std::vector<double> weights;  // min-max normalized to [0, 1]
  bool constant = false;        // every channel equal; weights all 0.5
};

/// Reduces features [N, F] to one scalar per channel and min-max normalizes.
inline TopomapWeights topomap_weights(std::span<const double> features, std::size_t N,
                                      Reduction r = Reduction::mean_abs) {
  if (N == 0 || features.size() % N != 0 || features.size() == 0) {
    throw DimensionError("topomap: " + std::to_string(features.size()) + " values do not form " +
                         std::to_string(N) + " rows");
  }
  const std::size_t F = features.size() / N;
  TopomapWeights out;
  for (std::size_t n = 0; n < N; ++n) out.raw.push_back(reduce_features(features.subspan(n * F, F), r));
  for (double v : out.raw)
    if (!std::isfinite(v)) throw NumericError("topomap: non-finite channel value");
  const auto [lo, hi] = std::minmax_element(out.raw.begin(), out.raw.end());
  const double mn = *lo, mx = *hi;
  out.constant = mx == mn;
  for (double v : out.raw) out.weights.push_back(out.constant ? 0.5 : (v - mn) / (mx - mn));
  return out;
}

struct TopomapTable {
  std::vector<std::string> channel_names;
  std::vector<double> weights;
};

inline void write_topomap_csv(const std::filesystem::path& path, const TopomapTable& t) {
  if (t.channel_names.size() != t.weights.size()) {
    throw DimensionError("topomap csv: " + std::to_string(t.weights.size()) + " weights for " +
                         std::to_string(t.channel_names.size()) + " channels");
  }
  std::string out = "channel,weight\n";
  for (std::size_t i = 0; i < t.weights.size(); ++i) {
    out += detail::csv_field(t.channel_names[i]) + "," + detail::format_value(t.weights[i]) + "\n";
  }
  detail::write_text(path, out);
}

inline TopomapTable read_topomap_csv(const std::filesystem::path& path) {
  auto rows = detail::parse_csv(detail::read_text(path));
  if (rows.empty() || rows[0] != std::vector<std::string>{"channel", "weight"}) {
    throw FormatError(path.string() + ": expected header channel,weight");
  }
  TopomapTable t;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 2) throw FormatError(path.string() + ": row " + std::to_string(r + 1) + " is ragged");
    t.channel_names.push_back(rows[r][0]);
    t.weights.push_back(detail::parse_value(rows[r][1], path.string()));
  }
  return t;
}

// ------------------------------------------------------ model exporters

enum class AdjacencyKind { S, S_base, S_overall, M };

inline std::string adjacency_name(AdjacencyKind k) {
  switch (k) {
    case AdjacencyKind::S: return "S";
    case AdjacencyKind::S_base: return "S_base";
    case AdjacencyKind::S_overall: return "S_overall";
    case AdjacencyKind::M: return "M";
  }
  return "S";
}

inline AdjacencyKind parse_adjacency_kind(const std::string& s) {
  for (auto k : {AdjacencyKind::S, AdjacencyKind::S_base, AdjacencyKind::S_overall, AdjacencyKind::M})
    if (adjacency_name(k) == s) return k;
  throw ConfigError("unknown adjacency matrix '" + s + "' (expected S, S_base, S_overall or M)");
}

/// Forward trace of one epoch plus the metadata written to sidecars.
template <typename T>
struct SampleTrace {
  ForwardTrace<T> trace;
  nlohmann::json sample;
  std::vector<std::string> warnings;
};

/// Runs an eval-mode forward pass on a single epoch with tracing.
template <typename T>
SampleTrace<T> trace_sample(NhgnetModel<T>& model, const EegEpoch& epoch, const std::vector<std::string>& channels) {
  const auto& cfg = model.config();
  if (channels.size() != cfg.n_channels) {
    throw DimensionError("export: sample has " + std::to_string(channels.size()) + " channels, model expects " +
                         std::to_string(cfg.n_channels));
  }
  if (epoch.data.size() != cfg.n_channels * cfg.epoch_samples) {
    throw DimensionError("export: sample has " + std::to_string(epoch.data.size()) + " values, model expects " +
                         std::to_string(cfg.n_channels * cfg.epoch_samples));
  }
  SampleTrace<T> out;
  Tensor<T> x({1, cfg.n_channels, cfg.epoch_samples});
  std::copy(epoch.data.begin(), epoch.data.end(), x.values().begin());
  {
    NoGradGuard no_grad;
    model.forward(x, Mode::eval, nullptr, &out.trace);
  }
  const auto& probs = out.trace.probs.values();
  const bool fatigue = probs[1] > probs[0];
  out.sample = {{"subject", epoch.subject_id},
                {"epoch_id", epoch.epoch_id},
                {"true_label", label_name(epoch.label)},
                {"predicted_label", label_name(fatigue ? Label::fatigue : Label::vigilance)},
                {"probabilities", {{"vigilance", static_cast<double>(probs[0])}, {"fatigue", static_cast<double>(probs[1])}}}};
  if (!model.trained()) out.warnings.push_back("model is not trained; exported values reflect initial parameters");
  return out;
}

namespace detail {

template <typename T>
std::vector<double> first_sample(const Tensor<T>& t, std::size_t count) {
  if (t.size() < count) throw DimensionError("export: traced tensor smaller than expected");
  return {t.values().begin(), t.values().begin() + static_cast<long>(count)};
}

inline nlohmann::json sidecar(const std::string& kind, const std::vector<std::string>& channels,
                              const nlohmann::json& sample, const nlohmann::json& model_cfg, bool trained,
                              const std::vector<std::string>& warnings) {
  return {{"kind", kind},           {"channels", channels}, {"sample", sample},
          {"model", model_cfg},     {"model_trained", trained}, {"warnings", warnings}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  return p.replace_extension(".json");
}

}  // namespace detail

struct ExportedFile {
  std::filesystem::path csv, sidecar;
};

/// Writes one adjacency matrix of the traced sample to `csv_path` (N + 1
/// rows) with a JSON sidecar next to it.
template <typename T>
ExportedFile export_adjacency(NhgnetModel<T>& model, const EegEpoch& epoch, const std::vector<std::string>& channels,
                              const std::filesystem::path& csv_path, AdjacencyKind kind = AdjacencyKind::S) {
  auto st = trace_sample(model, epoch, channels);
  const std::size_t N = channels.size();
  const Tensor<T>* src = &st.trace.S;
  if (kind == AdjacencyKind::S_base) src = &st.trace.S_base;
  if (kind == AdjacencyKind::S_overall) src = &st.trace.S_overall;
  if (kind == AdjacencyKind::M) src = &st.trace.M;
  LabeledMatrix m{channels, detail::first_sample(*src, N * N)};
  ExportedFile out{csv_path, detail::sidecar_path(csv_path)};
  write_matrix_csv(out.csv, m);
  auto side = detail::sidecar("adjacency", channels, st.sample, model.config(), model.trained(), st.warnings);
  side["matrix"] = adjacency_name(kind);
  side["input_independent"] = kind == AdjacencyKind::M;
  detail::write_text(out.sidecar, side.dump(2) + "\n");
  return out;
}

/// Writes per-channel weights from G_overall of the traced sample:
/// reduction over features, then min-max normalization.
template <typename T>
ExportedFile export_topomap(NhgnetModel<T>& model, const EegEpoch& epoch, const std::vector<std::string>& channels,
                            const std::filesystem::path& csv_path, Reduction reduction = Reduction::mean_abs) {
  auto st = trace_sample(model, epoch, channels);
  const std::size_t N = channels.size(), F = model.config().gcn_out_features;
  auto w = topomap_weights(detail::first_sample(st.trace.G_overall, N * F), N, reduction);
  if (w.constant) st.warnings.push_back("channel reduction is constant; all weights set to 0.5");
  ExportedFile out{csv_path, detail::sidecar_path(csv_path)};
  write_topomap_csv(out.csv, {channels, w.weights});
  auto side = detail::sidecar("topomap", channels, st.sample, model.config(), model.trained(), st.warnings);
  side["reduction"] = reduction_name(reduction);
  side["constant_reduction"] = w.constant;
  side["raw"] = w.raw;
  detail::write_text(out.sidecar, side.dump(2) + "\n");
  return out;
}

}  // namespace nhgnet
