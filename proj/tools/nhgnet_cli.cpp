#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nhgnet/app.hpp"
#include "nhgnet/platform.hpp"

namespace {

using nlohmann::json;

struct Flags {
  std::string config;
  json values = json::object();
};

template <typename V>
void value_flag(CLI::App* app, Flags& f, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<V>(name, [&f, key](const V& v) { f.values[key] = v; }, help);
}

void bool_flag(CLI::App* app, Flags& f, const std::string& name, const std::string& key, const std::string& help) {
  app->add_flag_callback(name, [&f, key] { f.values[key] = true; }, help);
}

void band_flag(CLI::App* app, Flags& f, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<std::vector<double>>(name, [&f, key](const std::vector<double>& v) { f.values[key] = v; },
                                                 help)
      ->expected(2);
}

void shared_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file (flags override its values)");
  value_flag<std::uint64_t>(app, f, "--seed", "seed", "Random seed");
  value_flag<std::string>(app, f, "--out", "out", "Output directory");
  value_flag<std::string>(app, f, "--precision", "precision", "single or double");
  value_flag<std::string>(app, f, "--mode", "mode", "intra or inter");
  value_flag<std::string>(app, f, "--attention", "attention", "ef_tanh, ef_sigmoid, ef_softmax or none");
  value_flag<std::string>(app, f, "--adjacency", "adjacency",
                          "dynamic_similarity, dynamic_random, fixed_similarity or fixed_random");
  value_flag<std::size_t>(app, f, "--batch-size", "batch_size", "Mini-batch size");
  bool_flag(app, f, "--force", "force", "Overwrite a non-empty output directory");
}

void data_flags(CLI::App* app, Flags& f) {
  value_flag<std::string>(app, f, "--data", "data", "Dataset manifest or directory");
  value_flag<double>(app, f, "--epoch-len", "epoch_len_s", "Epoch length in seconds when the manifest gives none");
  value_flag<double>(app, f, "--resample", "resample_hz", "Resample rate in Hz (0 keeps the recorded rate)");
}

}  // namespace

int main(int argc, char** argv) {
  nhgnet::tune_allocator();
  nhgnet::app::init_logging();

  CLI::App app{"NHGNet EEG fatigue classifier"};
  app.require_subcommand(1);
  Flags f;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic two-class EEG dataset");
  shared_flags(synth, f);
  value_flag<std::size_t>(synth, f, "--epochs-per-class", "synth_epochs_per_class", "Epochs per class and subject");
  value_flag<std::size_t>(synth, f, "--subjects", "synth_subjects", "Number of subjects");
  value_flag<double>(synth, f, "--noise", "synth_noise", "Background noise level");
  value_flag<double>(synth, f, "--fs", "synth_fs", "Sampling rate in Hz");
  value_flag<double>(synth, f, "--synth-epoch-len", "synth_epoch_len_s", "Epoch length in seconds");
  band_flag(synth, f, "--vigilance-band", "synth_vigilance_band", "Vigilance band LO HI in Hz");
  band_flag(synth, f, "--fatigue-band", "synth_fatigue_band", "Fatigue band LO HI in Hz");

  auto* train = app.add_subcommand("train", "Run nested cross-validation");
  shared_flags(train, f);
  data_flags(train, f);
  value_flag<double>(train, f, "--lr", "lr", "Adam learning rate");
  value_flag<std::size_t>(train, f, "--max-epochs", "max_epochs", "Epoch cap per fit");
  value_flag<std::size_t>(train, f, "--patience", "patience", "Early-stopping patience");
  value_flag<std::size_t>(train, f, "--outer-folds", "outer_folds", "Outer folds");
  value_flag<std::size_t>(train, f, "--inner-folds", "inner_folds", "Inner folds");
  bool_flag(train, f, "--parallel-folds", "parallel_folds", "Train folds concurrently");

  auto* eval = app.add_subcommand("eval", "Evaluate a saved model");
  shared_flags(eval, f);
  data_flags(eval, f);
  value_flag<std::string>(eval, f, "--model", "model", "Model file");
  value_flag<std::string>(eval, f, "--split", "split", "all, subject:<id>, fold:<k> or indices:<i,j,...>");

  auto* exp = app.add_subcommand("export", "Export adjacency matrices or topographic weights");
  shared_flags(exp, f);
  data_flags(exp, f);
  value_flag<std::string>(exp, f, "--model", "model", "Model file");
  value_flag<std::size_t>(exp, f, "--sample", "sample", "Dataset index of the epoch to trace");
  value_flag<std::string>(exp, f, "--kind", "kind", "adjacency or topomap");
  value_flag<std::string>(exp, f, "--matrix", "matrix", "S, S_base, S_overall or M");
  value_flag<std::string>(exp, f, "--reduction", "reduction", "mean_abs, max_abs or rms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : nhgnet::app::kConfigError;
  }

  try {
    const json file = f.config.empty() ? json() : nhgnet::app::read_json_file(f.config);
    const auto cfg = nhgnet::app::resolve_config(file, f.values);
    json result;
    if (*synth) result = nhgnet::app::cmd_synth(cfg);
    else if (*train) result = nhgnet::app::cmd_train(cfg);
    else if (*eval) result = nhgnet::app::cmd_eval(cfg);
    else result = nhgnet::app::cmd_export(cfg);
    std::cout << result.dump(2) << "\n";
    return nhgnet::app::kOk;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return nhgnet::app::exit_code_for(e);
  }
}
