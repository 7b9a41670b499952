#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"
#include "nhgnet/export.hpp"
#include "nhgnet/model.hpp"
#include "nhgnet/model_io.hpp"
#include "nhgnet/synth.hpp"
#include "nhgnet/training.hpp"

namespace nhgnet::app {

/// Everything a command needs, as one flat key-value document. Sources are
/// merged defaults < config file < command-line flags.
struct RunConfig {
  // Paths and run control.
  std::string data;
  std::string out = "nhgnet_out";
  std::string model;
  std::uint64_t seed = 1;
  Precision precision = Precision::single;
  CvMode mode = CvMode::intra;
  bool force = false;

  // Data loading.
  double epoch_len_s = 3.0;
  double resample_hz = 128.0;  // 0 keeps the recorded rate

  // Model hyperparameters; channel count, epoch length and rate come from data.
  NhgnetConfig net;

  // Training.
  TrainConfig train;
  std::optional<std::size_t> batch_size;  // default 64 intra, 1024 inter

  // Synthesis.
  SynthConfig synth;

  // Evaluation and export.
  std::string split = "all";
  std::string kind = "adjacency";
  std::string matrix = "S";
  std::string reduction = "mean_abs";
  std::size_t sample = 0;

  std::size_t effective_batch_size() const {
    return batch_size ? *batch_size : (mode == CvMode::intra ? 64 : 1024);
  }

  /// Checks everything that does not depend on the dataset.
  void validate() const {
    if (out.empty()) throw ConfigError("out must not be empty");
    if (!(epoch_len_s > 0)) throw ConfigError("epoch_len_s must be > 0");
    if (resample_hz < 0) throw ConfigError("resample_hz must be >= 0");
    if (batch_size && *batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (net.gcn_out_features == 0) throw ConfigError("gcn_out_features must be >= 1");
    if (!(net.dropout_rate >= 0 && net.dropout_rate < 1)) throw ConfigError("dropout_rate must be in [0, 1)");
    if (!(net.lambda1 >= 0) || !(net.lambda2 >= 0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
    if (!(net.leaky_slope >= 0)) throw ConfigError("leaky_slope must be >= 0");
    train.validate();
    synth.validate();
    parse_reduction(reduction);
    parse_adjacency_kind(matrix);
    if (kind != "adjacency" && kind != "topomap") {
      throw ConfigError("unknown export kind '" + kind + "' (expected adjacency or topomap)");
    }
  }
};

inline nlohmann::json band_json(const BandSpec& b) { return nlohmann::json::array({b.lo_hz, b.hi_hz}); }

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"data", c.data},
       {"out", c.out},
       {"model", c.model},
       {"seed", c.seed},
       {"precision", precision_name(c.precision)},
       {"mode", c.mode},
       {"force", c.force},
       {"epoch_len_s", c.epoch_len_s},
       {"resample_hz", c.resample_hz},
       {"attention", c.net.attention},
       {"adjacency", c.net.adjacency},
       {"gcn_out_features", c.net.gcn_out_features},
       {"dropout_rate", c.net.dropout_rate},
       {"lambda1", c.net.lambda1},
       {"lambda2", c.net.lambda2},
       {"leaky_slope", c.net.leaky_slope},
       {"regularize_bias_and_bn", c.net.regularize_bias_and_bn},
       {"batch_size", c.batch_size ? nlohmann::json(*c.batch_size) : nlohmann::json(nullptr)},
       {"synth_channels", c.synth.channel_names},
       {"synth_fs", c.synth.fs},
       {"synth_epoch_len_s", c.synth.epoch_len_s},
       {"synth_epochs_per_class", c.synth.epochs_per_class},
       {"synth_subjects", c.synth.n_subjects},
       {"synth_noise", c.synth.noise_level},
       {"synth_vigilance_band", band_json(c.synth.bands[0])},
       {"synth_fatigue_band", band_json(c.synth.bands[1])},
       {"synth_vigilance_channels", c.synth.bands[0].channels},
       {"synth_fatigue_channels", c.synth.bands[1].channels},
       {"synth_amplitude", c.synth.bands[0].amplitude},
       {"split", c.split},
       {"kind", c.kind},
       {"matrix", c.matrix},
       {"reduction", c.reduction},
       {"sample", c.sample}};
  nlohmann::json t = c.train;
  t.erase("batch_size");
  j.update(t);
}

namespace detail {

template <typename V>
V get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + j.dump());
  }
}

inline void set_band(const nlohmann::json& v, const std::string& key, BandSpec& b) {
  auto pair = get_as<std::vector<double>>(v, key);
  if (pair.size() != 2) throw ConfigError("config key '" + key + "' must be [lo_hz, hi_hz]");
  b.lo_hz = pair[0];
  b.hi_hz = pair[1];
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json train_keys = TrainConfig{};
  nlohmann::json train_patch = nlohmann::json::object();
  for (const auto& [key, v] : j.items()) {
    using detail::get_as;
    if (key == "data") c.data = get_as<std::string>(v, key);
    else if (key == "out") c.out = get_as<std::string>(v, key);
    else if (key == "model") c.model = get_as<std::string>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "precision") c.precision = parse_precision(get_as<std::string>(v, key));
    else if (key == "mode") c.mode = parse_cv_mode(get_as<std::string>(v, key));
    else if (key == "force") c.force = get_as<bool>(v, key);
    else if (key == "epoch_len_s") c.epoch_len_s = get_as<double>(v, key);
    else if (key == "resample_hz") c.resample_hz = get_as<double>(v, key);
    else if (key == "attention") c.net.attention = parse_attention(get_as<std::string>(v, key));
    else if (key == "adjacency") c.net.adjacency = parse_adjacency(get_as<std::string>(v, key));
    else if (key == "gcn_out_features") c.net.gcn_out_features = get_as<std::size_t>(v, key);
    else if (key == "dropout_rate") c.net.dropout_rate = get_as<double>(v, key);
    else if (key == "lambda1") c.net.lambda1 = get_as<double>(v, key);
    else if (key == "lambda2") c.net.lambda2 = get_as<double>(v, key);
    else if (key == "leaky_slope") c.net.leaky_slope = get_as<double>(v, key);
    else if (key == "regularize_bias_and_bn") c.net.regularize_bias_and_bn = get_as<bool>(v, key);
    else if (key == "batch_size") {
      if (v.is_null()) c.batch_size.reset();
      else c.batch_size = get_as<std::size_t>(v, key);
    }
    else if (key == "synth_channels") c.synth.channel_names = get_as<std::vector<std::string>>(v, key);
    else if (key == "synth_fs") c.synth.fs = get_as<double>(v, key);
    else if (key == "synth_epoch_len_s") c.synth.epoch_len_s = get_as<double>(v, key);
    else if (key == "synth_epochs_per_class") c.synth.epochs_per_class = get_as<std::size_t>(v, key);
    else if (key == "synth_subjects") c.synth.n_subjects = get_as<std::size_t>(v, key);
    else if (key == "synth_noise") c.synth.noise_level = get_as<double>(v, key);
    else if (key == "synth_vigilance_band") detail::set_band(v, key, c.synth.bands[0]);
    else if (key == "synth_fatigue_band") detail::set_band(v, key, c.synth.bands[1]);
    else if (key == "synth_vigilance_channels") c.synth.bands[0].channels = get_as<std::vector<std::string>>(v, key);
    else if (key == "synth_fatigue_channels") c.synth.bands[1].channels = get_as<std::vector<std::string>>(v, key);
    else if (key == "synth_amplitude") {
      c.synth.bands[0].amplitude = c.synth.bands[1].amplitude = get_as<double>(v, key);
    }
    else if (key == "split") c.split = get_as<std::string>(v, key);
    else if (key == "kind") c.kind = get_as<std::string>(v, key);
    else if (key == "matrix") c.matrix = get_as<std::string>(v, key);
    else if (key == "reduction") c.reduction = get_as<std::string>(v, key);
    else if (key == "sample") c.sample = get_as<std::size_t>(v, key);
    else if (train_keys.contains(key)) train_patch[key] = v;
    else throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    nlohmann::json t = c.train;
    t.update(train_patch);
    c.train = t.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training setting: ") + e.what());
  }
  c.synth.seed = c.seed;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Defaults, then `file` (may be null), then `flags`; validated.
inline RunConfig resolve_config(const nlohmann::json& file, const nlohmann::json& flags) {
  nlohmann::json merged = RunConfig{};
  for (const auto* layer : {&file, &flags}) {
    if (layer->is_null()) continue;
    if (!layer->is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [k, v] : layer->items()) {
      if (!merged.contains(k)) throw ConfigError("unknown config key '" + k + "'");
      merged[k] = v;
    }
  }
  RunConfig c = merged.get<RunConfig>();
  c.validate();
  return c;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  nhgnet::detail::write_text(path, j.dump(2) + "\n");
}

/// Writes the fully resolved configuration next to the outputs; running
/// again with --config on this file reproduces the run.
inline std::filesystem::path echo_config(const RunConfig& c) {
  const auto path = std::filesystem::path(c.out) / "effective_config.json";
  nlohmann::json j = c;
  write_json(path, j);
  return path;
}

inline std::filesystem::path manifest_path(const std::string& data) {
  if (data.empty()) throw ConfigError("no dataset given (set data / --data)");
  std::filesystem::path p(data);
  if (std::filesystem::is_directory(p)) p /= "manifest.json";
  return p;
}

inline EpochedDataset load_data(const RunConfig& c) {
  LoadOptions opts;
  opts.epoch_len_s = c.epoch_len_s;
  if (c.resample_hz > 0) opts.target_fs = c.resample_hz;
  return load_dataset(manifest_path(c.data), opts);
}

/// Model configuration for a dataset: shape from the data, the rest from c.
inline NhgnetConfig model_config_for(const EpochedDataset& ds, const RunConfig& c) {
  NhgnetConfig m = c.net;
  m.n_channels = ds.n_channels();
  m.epoch_samples = ds.epoch_samples;
  const double fs = std::round(ds.fs);
  if (std::abs(ds.fs - fs) > 1e-9 || fs < 1) {
    throw ConfigError("sampling rate " + std::to_string(ds.fs) + " Hz is not a whole number");
  }
  m.fs = static_cast<std::size_t>(fs);
  m.validate();
  return m;
}

inline TrainConfig train_config_for(const RunConfig& c) {
  TrainConfig t = c.train;
  t.batch_size = c.effective_batch_size();
  return t;
}

inline bool non_empty_dir(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) && !std::filesystem::is_empty(p);
}

// --------------------------------------------------------------- synth

inline nlohmann::json cmd_synth(const RunConfig& c) {
  c.validate();
  const std::filesystem::path out(c.out);
  if (non_empty_dir(out) && !c.force) {
    throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  }
  SynthConfig s = c.synth;
  s.seed = c.seed;
  auto ds = synth_generate(s);
  const auto manifest = save_dataset(ds, out);
  echo_config(c);
  spdlog::info("wrote {} epochs to {}", ds.size(), manifest.string());
  nlohmann::json summary = {{"manifest", manifest.string()},
                            {"epochs", ds.size()},
                            {"class_counts",
                             {{label_name(Label::vigilance), ds.class_counts[0]},
                              {label_name(Label::fatigue), ds.class_counts[1]}}}};
  return summary;
}

// --------------------------------------------------------------- train

template <typename T>
nlohmann::json run_train(const RunConfig& c, const EpochedDataset& ds) {
  const auto mcfg = model_config_for(ds, c);
  const auto tcfg = train_config_for(c);
  const std::filesystem::path out(c.out);
  CvOptions opts;
  opts.checkpoints.dir = out / "checkpoints";
  opts.keep_models = false;
  opts.progress = [](const std::string& msg) { spdlog::info("{}", msg); };
  spdlog::info("{} cross-validation on {} epochs ({} channels, {} samples), precision {}",
               c.mode == CvMode::intra ? "intra-subject" : "inter-subject", ds.size(), mcfg.n_channels,
               mcfg.epoch_samples, precision_name(precision_of<T>()));
  auto res = nested_cv<T>(ds, mcfg, tcfg, c.mode, c.seed, opts);
  nlohmann::json metrics = metrics_json(res);
  metrics["seed"] = c.seed;
  metrics["precision"] = precision_name(precision_of<T>());
  metrics["model"] = mcfg;
  metrics["train"] = tcfg;
  write_json(out / "metrics.json", metrics);
  write_json(out / "train_logs.json", train_logs_json(res));
  if (c.mode == CvMode::intra) write_json(out / "fold_plan.json", res.plan);
  spdlog::info("mean accuracy {:.4f} (std {:.4f}) over {} folds", res.aggregate.accuracy.mean,
               res.aggregate.accuracy.std, res.folds.size());
  return metrics;
}

inline nlohmann::json cmd_train(const RunConfig& c) {
  c.validate();
  auto ds = load_data(c);
  model_config_for(ds, c);
  std::filesystem::create_directories(c.out);
  echo_config(c);
  return c.precision == Precision::single ? run_train<float>(c, ds) : run_train<double>(c, ds);
}

// ---------------------------------------------------------------- eval

/// Resolves a split spec against a dataset: "all", "subject:<id>",
/// "fold:<k>" (outer test fold k of the plan for the run seed) or
/// "indices:<i>,<j>,...".
inline std::vector<std::size_t> resolve_split(const std::string& spec, const EpochedDataset& ds,
                                              const RunConfig& c) {
  std::vector<std::size_t> idx;
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  auto parse_index = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("split '" + spec + "': bad index '" + s + "'");
    }
  };
  if (kind == "all" && arg.empty()) {
    idx = nhgnet::detail::iota_idx(ds.size());
  } else if (kind == "subject") {
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.epochs[i].subject_id == arg) idx.push_back(i);
  } else if (kind == "fold") {
    const auto k = parse_index(arg);
    auto plan = make_fold_plan(ds, c.seed, c.train.outer_folds, c.train.inner_folds);
    if (k >= plan.outer_folds.size()) throw ConfigError("split '" + spec + "': no such outer fold");
    idx = plan.outer_folds[k].test_idx;
  } else if (kind == "indices") {
    std::size_t start = 0;
    while (start <= arg.size()) {
      const auto comma = arg.find(',', start);
      idx.push_back(parse_index(arg.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    for (auto i : idx)
      if (i >= ds.size()) throw ConfigError("split '" + spec + "': index " + std::to_string(i) + " out of range");
  } else {
    throw ConfigError("unknown split '" + spec + "' (expected all, subject:<id>, fold:<k> or indices:<list>)");
  }
  if (idx.empty()) throw DataError("split '" + spec + "' selects no epochs");
  return idx;
}

inline void check_compatible(const NhgnetConfig& m, const EpochedDataset& ds) {
  if (ds.n_channels() != m.n_channels) {
    throw DimensionError("dataset has " + std::to_string(ds.n_channels()) + " channels, model expects " +
                         std::to_string(m.n_channels));
  }
  if (ds.epoch_samples != m.epoch_samples) {
    throw DimensionError("dataset epochs have " + std::to_string(ds.epoch_samples) + " samples, model expects " +
                         std::to_string(m.epoch_samples));
  }
}

template <typename T>
nlohmann::json run_eval(const RunConfig& c, const EpochedDataset& ds) {
  auto model = load_model<T>(c.model);
  check_compatible(model.config(), ds);
  const auto idx = resolve_split(c.split, ds, c);
  auto preds = model.predict(ds, idx);
  std::vector<Label> predicted, truth;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& e = ds.epochs[idx[i]];
    predicted.push_back(preds[i].predicted);
    truth.push_back(e.label);
    rows.push_back({{"index", idx[i]},
                    {"epoch_id", e.epoch_id},
                    {"label", label_name(e.label)},
                    {"predicted", label_name(preds[i].predicted)},
                    {"probabilities", preds[i].probs}});
  }
  return {{"model", c.model},
          {"split", c.split},
          {"samples", idx.size()},
          {"model_trained", model.trained()},
          {"metrics", compute_metrics(predicted, truth)},
          {"predictions", rows}};
}

inline nlohmann::json cmd_eval(const RunConfig& c) {
  c.validate();
  if (c.model.empty()) throw ConfigError("no model given (set model / --model)");
  const auto header = peek_model_header(c.model);
  auto ds = load_data(c);
  auto result = header.precision == Precision::single ? run_eval<float>(c, ds) : run_eval<double>(c, ds);
  std::filesystem::create_directories(c.out);
  echo_config(c);
  write_json(std::filesystem::path(c.out) / "eval_metrics.json", result);
  return result;
}

// -------------------------------------------------------------- export

template <typename T>
nlohmann::json run_export(const RunConfig& c, const EpochedDataset& ds) {
  auto model = load_model<T>(c.model);
  check_compatible(model.config(), ds);
  if (c.sample >= ds.size()) {
    throw ConfigError("sample " + std::to_string(c.sample) + " out of range (dataset has " +
                      std::to_string(ds.size()) + " epochs)");
  }
  const auto& epoch = ds.epochs[c.sample];
  const std::filesystem::path out(c.out);
  const std::string tag = "sample" + std::to_string(c.sample);
  ExportedFile files;
  if (c.kind == "adjacency") {
    const auto kind = parse_adjacency_kind(c.matrix);
    files = export_adjacency(model, epoch, ds.channel_names, out / ("adjacency_" + c.matrix + "_" + tag + ".csv"), kind);
  } else {
    files = export_topomap(model, epoch, ds.channel_names, out / ("topomap_" + tag + ".csv"),
                           parse_reduction(c.reduction));
  }
  return {{"csv", files.csv.string()}, {"sidecar", files.sidecar.string()}};
}

inline nlohmann::json cmd_export(const RunConfig& c) {
  c.validate();
  if (c.model.empty()) throw ConfigError("no model given (set model / --model)");
  const auto header = peek_model_header(c.model);
  auto ds = load_data(c);
  auto result = header.precision == Precision::single ? run_export<float>(c, ds) : run_export<double>(c, ds);
  echo_config(c);
  return result;
}

// ---------------------------------------------------------- exit codes

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4 };

/// Maps the library's exception types onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kNumericError;
  if (dynamic_cast<const DataError*>(&e)) return kDataError;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kConfigError;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kDataError;
  return 1;
}

/// Log level from NHGNET_LOG (trace, debug, info, warn, error, off).
inline void init_logging() {
  const char* env = std::getenv("NHGNET_LOG");
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

}  // namespace nhgnet::app
