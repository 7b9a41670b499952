#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"
#include "nhgnet/model.hpp"

namespace nhgnet {

// Model file layout (little-endian):
//   "NHGN" | u32 version | u32 header_len | header JSON
//   u32 entry_count, then per entry:
//   u32 name_len | name | u32 kind (0 parameter, 1 buffer) | u32 ndim | u32 dims[ndim] | values
// Values are float32 for single-precision models and float64 for double.
// Header JSON: {"config": {...}, "precision": "single"|"double", "trained": bool}.

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class Precision { single, dbl };

inline std::string precision_name(Precision p) { return p == Precision::single ? "single" : "double"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "single" || s == "float" || s == "float32") return Precision::single;
  if (s == "double" || s == "float64") return Precision::dbl;
  throw ConfigError("unknown precision '" + s + "'");
}

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::single : Precision::dbl;
}

struct ModelHeader {
  NhgnetConfig config;
  Precision precision = Precision::single;
  bool trained = false;
};

namespace detail {

inline void check_stream(std::istream& is, const std::string& what) {
  if (!is) throw FormatError("model file truncated while reading " + what);
}

inline ModelHeader read_model_header(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "NHGN", 4) != 0) throw FormatError("not a model file (bad magic)");
  const std::uint32_t version = read_u32(is, "model version");
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported model format version " + std::to_string(version) + " (expected " +
                      std::to_string(kModelFormatVersion) + ")");
  }
  const std::uint32_t len = read_u32(is, "model header length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  check_stream(is, "model header");
  ModelHeader h;
  try {
    auto j = nlohmann::json::parse(text);
    h.config = j.at("config").get<NhgnetConfig>();
    h.precision = parse_precision(j.at("precision").get<std::string>());
    h.trained = j.value("trained", false);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt model header: ") + e.what());
  }
  return h;
}

template <typename S, typename T>
void read_values(std::istream& is, std::vector<T>& out, const std::string& name) {
  std::vector<S> raw(out.size());
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(S)));
  check_stream(is, name);
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<T>(raw[i]);
}

}  // namespace detail

template <typename T>
void save_model(const NhgnetModel<T>& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write model file " + path.string());
  nlohmann::json header = {{"config", model.config()},
                           {"precision", precision_name(precision_of<T>())},
                           {"trained", model.trained()}};
  const std::string text = header.dump();
  os.write("NHGN", 4);
  detail::write_u32(os, kModelFormatVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));

  auto params = model.parameters();
  auto buffers = model.buffers();
  detail::write_u32(os, static_cast<std::uint32_t>(params.size() + buffers.size()));
  auto write_entry = [&](const std::string& name, std::uint32_t kind, const Shape& shape,
                         const std::vector<T>& values) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, kind);
    detail::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(T)));
  };
  for (const auto* p : params) write_entry(p->name, 0, p->tensor.shape(), p->tensor.values());
  for (const auto* b : buffers) write_entry(b->name, 1, {b->values.size()}, b->values);
  if (!os) throw DataError("failed writing model file " + path.string());
}

inline ModelHeader peek_model_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open model file " + path.string());
  return detail::read_model_header(is);
}

/// Loads a model; values stored in the other precision are converted.
template <typename T>
NhgnetModel<T> load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open model file " + path.string());
  const ModelHeader h = detail::read_model_header(is);
  NhgnetModel<T> model(h.config, 0);
  model.set_trained(h.trained);

  const std::uint32_t count = detail::read_u32(is, "entry count");
  const std::size_t expected = model.parameters().size() + model.buffers().size();
  if (count != expected) {
    throw FormatError("model file has " + std::to_string(count) + " entries, expected " +
                      std::to_string(expected));
  }
  std::vector<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = detail::read_u32(is, "entry name length");
    if (name_len > 4096) throw FormatError("corrupt entry name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    detail::check_stream(is, "entry name");
    const std::uint32_t kind = detail::read_u32(is, "entry kind");
    const std::uint32_t ndim = detail::read_u32(is, "entry rank");
    if (ndim > 8) throw FormatError("corrupt rank for " + name);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_u32(is, "entry dims");

    std::vector<T>* target = nullptr;
    Shape want;
    if (kind == 0) {
      if (auto* p = model.find_parameter(name)) {
        target = &p->tensor.values();
        want = p->tensor.shape();
      }
    } else if (kind == 1) {
      for (auto* b : model.buffers()) {
        if (b->name == name) {
          target = &b->values;
          want = {b->values.size()};
        }
      }
    } else {
      throw FormatError("unknown entry kind for " + name);
    }
    if (!target) throw FormatError("unexpected entry '" + name + "' in model file");
    if (shape != want) {
      throw FormatError("entry '" + name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(want));
    }
    if (std::find(seen.begin(), seen.end(), name) != seen.end()) {
      throw FormatError("duplicate entry '" + name + "'");
    }
    seen.push_back(name);
    if (h.precision == Precision::single) {
      detail::read_values<float>(is, *target, name);
    } else {
      detail::read_values<double>(is, *target, name);
    }
    for (T v : *target) {
      if (!std::isfinite(static_cast<double>(v))) throw FormatError("non-finite value in entry '" + name + "'");
    }
  }
  return model;
}

}  // namespace nhgnet
