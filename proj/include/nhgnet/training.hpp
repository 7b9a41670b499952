#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"
#include "nhgnet/model.hpp"
#include "nhgnet/model_io.hpp"
#include "nhgnet/tsr.hpp"

namespace nhgnet {

// ---------------------------------------------------------------- optimizer

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Moments are kept in
/// double regardless of the model precision.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.lr >= 0) || !(opts_.eps > 0) || !(opts_.beta1 >= 0 && opts_.beta1 < 1) ||
        !(opts_.beta2 >= 0 && opts_.beta2 < 1)) {
      throw ConfigError("adam: lr must be >= 0, eps > 0 and betas in [0, 1)");
    }
    for (auto* p : params_) {
      m_.emplace_back(p->tensor.size(), 0.0);
      v_.emplace_back(p->tensor.size(), 0.0);
    }
  }

  const AdamOptions& options() const { return opts_; }
  double lr() const { return opts_.lr; }
  std::uint64_t steps() const { return step_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  /// Applies one update from the parameters' current gradients. A parameter
  /// without a gradient buffer is treated as having a zero gradient.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i]->tensor;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (!std::isfinite(static_cast<double>(g[k]))) {
          throw NumericError("adam: non-finite gradient in " + params_[i]->name + "[" + std::to_string(k) +
                             "] at step " + std::to_string(step_ + 1));
        }
      }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i]->tensor;
      auto& vals = t.values();
      auto& m = m_[i];
      auto& v = v_[i];
      const bool has = t.has_grad();
      for (std::size_t k = 0; k < vals.size(); ++k) {
        const double g = has ? static_cast<double>(t.grad()[k]) : 0.0;
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g;
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g * g;
        const double update = opts_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.eps);
        vals[k] = static_cast<T>(static_cast<double>(vals[k]) - update);
      }
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
};

// ------------------------------------------------------------------ metrics

struct Metrics {
  double accuracy = 0, precision = 0, sensitivity = 0, specificity = 0, f1 = 0;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
};

inline void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"accuracy", m.accuracy}, {"precision", m.precision}, {"sensitivity", m.sensitivity},
       {"specificity", m.specificity}, {"f1", m.f1}, {"tp", m.tp}, {"tn", m.tn}, {"fp", m.fp}, {"fn", m.fn}};
}

inline void from_json(const nlohmann::json& j, Metrics& m) {
  j.at("accuracy").get_to(m.accuracy);
  j.at("precision").get_to(m.precision);
  j.at("sensitivity").get_to(m.sensitivity);
  j.at("specificity").get_to(m.specificity);
  j.at("f1").get_to(m.f1);
  j.at("tp").get_to(m.tp);
  j.at("tn").get_to(m.tn);
  j.at("fp").get_to(m.fp);
  j.at("fn").get_to(m.fn);
}

/// Fatigue is the positive class. Undefined ratios are reported as 0.
inline Metrics compute_metrics(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("compute_metrics: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw DataError("compute_metrics: no samples");
  Metrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool pos = predicted[i] == Label::fatigue;
    const bool actual = truth[i] == Label::fatigue;
    if (pos && actual) ++m.tp;
    else if (pos) ++m.fp;
    else if (actual) ++m.fn;
    else ++m.tn;
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : double(a) / double(b); };
  m.accuracy = ratio(m.tp + m.tn, m.total());
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  const double denom = m.precision + m.sensitivity;
  m.f1 = denom == 0 ? 0.0 : 2.0 * m.precision * m.sensitivity / denom;
  return m;
}

struct MetricSummary {
  double mean = 0, std = 0;
};

/// Mean and population standard deviation of each metric across folds.
struct AggregateMetrics {
  MetricSummary accuracy, precision, sensitivity, specificity, f1;
};

inline void to_json(nlohmann::json& j, const MetricSummary& s) { j = {{"mean", s.mean}, {"std", s.std}}; }

inline void to_json(nlohmann::json& j, const AggregateMetrics& a) {
  j = {{"accuracy", a.accuracy}, {"precision", a.precision}, {"sensitivity", a.sensitivity},
       {"specificity", a.specificity}, {"f1", a.f1}};
}

inline AggregateMetrics aggregate(const std::vector<Metrics>& rows) {
  if (rows.empty()) throw DataError("aggregate: no metric rows");
  auto summarize = [&](double Metrics::*field) {
    MetricSummary s;
    for (const auto& r : rows) s.mean += r.*field;
    s.mean /= static_cast<double>(rows.size());
    double ss = 0;
    for (const auto& r : rows) ss += (r.*field - s.mean) * (r.*field - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(rows.size()));
    return s;
  };
  return {summarize(&Metrics::accuracy), summarize(&Metrics::precision), summarize(&Metrics::sensitivity),
          summarize(&Metrics::specificity), summarize(&Metrics::f1)};
}

// ----------------------------------------------------------------- fold plan

struct InnerFold {
  std::vector<std::size_t> train_idx, val_idx;
};

struct OuterFold {
  std::vector<std::size_t> test_idx;
  std::vector<InnerFold> inner_folds;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<OuterFold> outer_folds;
};

inline void to_json(nlohmann::json& j, const InnerFold& f) { j = {{"train_idx", f.train_idx}, {"val_idx", f.val_idx}}; }
inline void to_json(nlohmann::json& j, const OuterFold& f) {
  j = {{"test_idx", f.test_idx}, {"inner_folds", f.inner_folds}};
}
inline void to_json(nlohmann::json& j, const FoldPlan& p) { j = {{"seed", p.seed}, {"outer_folds", p.outer_folds}}; }

namespace detail {

inline std::vector<std::size_t> iota_idx(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// SplitMix64 finalizer; derives independent stream seeds from a run seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix_seed(seed);
  for (auto p : path) s = mix_seed(s ^ mix_seed(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// Unbiased index in [0, n) from a 64-bit engine, independent of the
/// standard library's distribution implementation.
inline std::size_t draw_below(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return static_cast<std::size_t>(r % n);
}

inline void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw_below(rng, i)]);
}

/// Sizes and fatigue counts for a k-way split of m epochs (m1 fatigue).
struct SplitShape {
  std::vector<std::size_t> sizes, pos;
  double violation = 0;  // total excess over the one-sample tolerance
  std::size_t uneven = 0;  // parts whose size is off the floor/ceil of m/k
  double worst = 0;        // largest deviation from s * p over parts and complements
};

/// Chooses part sizes (within one of m/k) and per-part fatigue counts so
/// that every part and every complement stays within one sample of its
/// size times the proportion p. `extra(s, c)` adds a further cost for a
/// part of size s with c fatigue epochs (used to keep the complement
/// splittable). Minimizes (violation, uneven parts, worst deviation).
inline SplitShape shape_split(std::size_t m, std::size_t m1, std::size_t k, double p,
                              const std::function<double(std::size_t, std::size_t)>& extra = {}) {
  struct Cost {
    double violation = 0;
    std::size_t uneven = 0;
    double worst = 0;
    bool operator<(const Cost& o) const {
      if (violation != o.violation) return violation < o.violation;
      if (uneven != o.uneven) return uneven < o.uneven;
      return worst < o.worst;
    }
  };
  struct State {
    Cost cost;
    std::size_t prev_size = 0, prev_pos = 0, size = 0, pos = 0;
  };
  const std::size_t lo_even = m / k, hi_even = (m + k - 1) / k;
  const std::size_t s_lo = lo_even > 0 ? lo_even - 1 : 0, s_hi = hi_even + 1;
  std::vector<std::map<std::pair<std::size_t, std::size_t>, State>> stage(k + 1);
  stage[0][{0, 0}] = {};
  for (std::size_t i = 0; i < k; ++i) {
    for (const auto& [key, st] : stage[i]) {
      const auto [have_s, have_c] = key;
      for (std::size_t sz = std::max<std::size_t>(s_lo, 1); sz <= s_hi && have_s + sz <= m; ++sz) {
        const double want = double(sz) * p;
        const auto c_lo = static_cast<std::size_t>(std::max(0.0, std::floor(want) - 1));
        const auto c_hi = std::min<std::size_t>(sz, static_cast<std::size_t>(std::ceil(want) + 1));
        for (std::size_t c = c_lo; c <= c_hi && have_c + c <= m1; ++c) {
          if (sz - c > m - m1) continue;
          const double e_part = std::abs(double(c) - want);
          const double e_rest = std::abs(double(m1 - c) - double(m - sz) * p);
          double err = std::max(e_part, e_rest);
          Cost cost = st.cost;
          cost.violation += std::max(0.0, err - 1.0) + (extra ? extra(sz, c) : 0.0);
          cost.uneven += (sz != lo_even && sz != hi_even);
          cost.worst = std::max(cost.worst, err);
          auto& slot = stage[i + 1][{have_s + sz, have_c + c}];
          const bool fresh = slot.size == 0;
          if (fresh || cost < slot.cost) slot = {cost, have_s, have_c, sz, c};
        }
      }
    }
  }
  auto it = stage[k].find({m, m1});
  if (it == stage[k].end()) {
    throw DataError("fold plan: cannot split " + std::to_string(m) + " epochs into " + std::to_string(k) + " parts");
  }
  SplitShape out;
  out.violation = it->second.cost.violation;
  out.uneven = it->second.cost.uneven;
  out.worst = it->second.cost.worst;
  out.sizes.resize(k);
  out.pos.resize(k);
  std::pair<std::size_t, std::size_t> key{m, m1};
  for (std::size_t i = k; i > 0; --i) {
    const auto& st = stage[i].at(key);
    out.sizes[i - 1] = st.size;
    out.pos[i - 1] = st.pos;
    key = {st.prev_size, st.prev_pos};
  }
  return out;
}

/// Splits `idx` into parts of the given shape after shuffling each class.
inline std::vector<std::vector<std::size_t>> deal_parts(const std::vector<std::size_t>& idx,
                                                        std::span<const Label> labels, const SplitShape& shape,
                                                        std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, kNumClasses> members;
  for (auto i : idx) members[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& m : members) shuffle(m, rng);
  std::vector<std::vector<std::size_t>> parts(shape.sizes.size());
  std::size_t next_pos = 0, next_neg = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (std::size_t j = 0; j < shape.pos[i]; ++j) parts[i].push_back(members[1].at(next_pos++));
    for (std::size_t j = 0; j < shape.sizes[i] - shape.pos[i]; ++j) parts[i].push_back(members[0].at(next_neg++));
    std::sort(parts[i].begin(), parts[i].end());
  }
  return parts;
}

inline std::size_t count_positive(std::span<const std::size_t> idx, std::span<const Label> labels) {
  std::size_t n = 0;
  for (auto i : idx) n += labels[i] == Label::fatigue;
  return n;
}

/// k stratified parts of `idx`, proportions measured against the set itself.
inline std::vector<std::vector<std::size_t>> stratified_parts(const std::vector<std::size_t>& idx,
                                                              std::span<const Label> labels, std::size_t k,
                                                              std::mt19937_64& rng) {
  const std::size_t m1 = count_positive(idx, labels);
  const double p = idx.empty() ? 0.0 : double(m1) / double(idx.size());
  return deal_parts(idx, labels, shape_split(idx.size(), m1, k, p), rng);
}


}  // namespace detail

/// Stratified, seeded nested split: `outer` test folds, and within each
/// outer-train set `inner` train/val folds.
inline FoldPlan make_fold_plan(std::span<const Label> labels, std::uint64_t seed, std::size_t outer = 10,
                               std::size_t inner = 3) {
  if (outer < 2 || inner < 2) throw ConfigError("fold plan: need at least 2 outer and 2 inner folds");
  std::array<std::size_t, kNumClasses> counts{};
  for (auto l : labels) ++counts[static_cast<int>(l)];
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (counts[c] < outer) {
      throw DataError("fold plan: class " + label_name(static_cast<Label>(c)) + " has " +
                      std::to_string(counts[c]) + " epochs, need at least " + std::to_string(outer));
    }
  }
  std::mt19937_64 rng(detail::derive_seed(seed, {0xf01d}));
  const std::size_t n = labels.size(), n1 = counts[1];
  const double p = double(n1) / double(n);
  std::map<std::pair<std::size_t, std::size_t>, double> inner_cost;
  auto inner_violation = [&](std::size_t s, std::size_t c) {
    auto key = std::make_pair(n - s, n1 - c);
    auto it = inner_cost.find(key);
    if (it != inner_cost.end()) return it->second;
    double v = 1e9;
    try {
      v = detail::shape_split(n - s, n1 - c, inner, p).violation;
    } catch (const DataError&) {
    }
    return inner_cost[key] = v;
  };
  const auto outer_shape = detail::shape_split(n, n1, outer, p, inner_violation);
  std::vector<std::size_t> all = detail::iota_idx(n);
  FoldPlan plan;
  plan.seed = seed;
  auto tests = detail::deal_parts(all, labels, outer_shape, rng);
  for (std::size_t f = 0; f < outer; ++f) {
    OuterFold of;
    of.test_idx = tests[f];
    std::vector<std::size_t> rest;
    for (std::size_t g = 0; g < outer; ++g)
      if (g != f) rest.insert(rest.end(), tests[g].begin(), tests[g].end());
    std::sort(rest.begin(), rest.end());
    const auto shape = detail::shape_split(rest.size(), detail::count_positive(rest, labels), inner, p);
    auto parts = detail::deal_parts(rest, labels, shape, rng);
    for (std::size_t i = 0; i < inner; ++i) {
      InnerFold in;
      in.val_idx = parts[i];
      for (std::size_t j = 0; j < inner; ++j)
        if (j != i) in.train_idx.insert(in.train_idx.end(), parts[j].begin(), parts[j].end());
      std::sort(in.train_idx.begin(), in.train_idx.end());
      of.inner_folds.push_back(std::move(in));
    }
    plan.outer_folds.push_back(std::move(of));
  }
  return plan;
}

inline FoldPlan make_fold_plan(const EpochedDataset& ds, std::uint64_t seed, std::size_t outer = 10,
                               std::size_t inner = 3) {
  std::vector<Label> labels;
  for (const auto& e : ds.epochs) labels.push_back(e.label);
  return make_fold_plan(labels, seed, outer, inner);
}

// ----------------------------------------------------------------- training

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  std::size_t batch_size = 64;
  bool augment = true;
  TsrOptions tsr;
  std::size_t finetune_max_epochs = 50;
  std::size_t outer_folds = 10;
  std::size_t inner_folds = 3;
  bool parallel_folds = false;
  std::size_t eval_chunk = 256;

  AdamOptions adam() const { return {lr, beta1, beta2, eps}; }

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
    if (max_epochs == 0) throw ConfigError("train: max_epochs must be >= 1");
    if (patience == 0) throw ConfigError("train: patience must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (finetune_max_epochs == 0) throw ConfigError("train: finetune_max_epochs must be >= 1");
    if (outer_folds < 2 || inner_folds < 2) throw ConfigError("train: need at least 2 outer and 2 inner folds");
    if (tsr.n_segments == 0 || tsr.multiplier == 0) throw ConfigError("train: tsr segments and multiplier must be >= 1");
    if (!(eps > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("train: eps must be > 0 and betas in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"batch_size", c.batch_size},
       {"augment", c.augment},
       {"tsr_segments", c.tsr.n_segments},
       {"tsr_multiplier", c.tsr.multiplier},
       {"finetune_max_epochs", c.finetune_max_epochs},
       {"outer_folds", c.outer_folds},
       {"inner_folds", c.inner_folds},
       {"parallel_folds", c.parallel_folds}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.augment = j.value("augment", c.augment);
  c.tsr.n_segments = j.value("tsr_segments", c.tsr.n_segments);
  c.tsr.multiplier = j.value("tsr_multiplier", c.tsr.multiplier);
  c.finetune_max_epochs = j.value("finetune_max_epochs", c.finetune_max_epochs);
  c.outer_folds = j.value("outer_folds", c.outer_folds);
  c.inner_folds = j.value("inner_folds", c.inner_folds);
  c.parallel_folds = j.value("parallel_folds", c.parallel_folds);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, train_accuracy = 0, val_loss = 0, val_accuracy = 0;
  bool improved = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  std::size_t stop_epoch = 0;
  std::string stop_reason;
  double wall_time_s = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"train_loss", r.train_loss},
       {"train_accuracy", r.train_accuracy},
       {"val_loss", r.val_loss},
       {"val_accuracy", r.val_accuracy},
       {"improved", r.improved}};
}

inline void to_json(nlohmann::json& j, const TrainLog& l) {
  j = {{"epochs", l.epochs},
       {"best_epoch", l.best_epoch},
       {"best_val_accuracy", l.best_val_accuracy},
       {"stop_epoch", l.stop_epoch},
       {"stop_reason", l.stop_reason},
       {"wall_time_s", l.wall_time_s},
       {"seed", l.seed},
       {"config", l.config}};
}

/// Epoch ids seen by a training run, split by role. Augmented epochs are
/// recorded by id in `augmented`; their donors are always train epochs.
struct IndexAudit {
  std::set<std::string> train, val, augmented, val_augmented;

  bool touches(const std::string& id) const { return train.count(id) || val.count(id); }
};

/// Where and how to write checkpoints; empty dir disables them.
struct CheckpointSpec {
  std::filesystem::path dir;
  std::string stem;

  bool enabled() const { return !dir.empty(); }
  std::filesystem::path path(const std::string& suffix) const { return dir / (stem + "_" + suffix + ".nhgn"); }
};

inline std::string fold_stem(std::size_t outer) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fold%02zu", outer);
  return buf;
}

inline std::string inner_stem(std::size_t outer, std::size_t inner) {
  return fold_stem(outer) + "_inner" + std::to_string(inner);
}

/// Patience rule on validation accuracy: an epoch improves only if it is
/// strictly better than every earlier one.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records the next epoch's accuracy; returns true when it is a new best.
  bool observe(double accuracy) {
    ++epoch_;
    if (accuracy > best_) {
      best_ = accuracy;
      best_epoch_ = epoch_;
      return true;
    }
    return false;
  }

  bool should_stop() const { return epoch_ - best_epoch_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  std::size_t epochs() const { return epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0, best_epoch_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

template <typename T>
struct FitResult {
  NhgnetModel<T> model;
  TrainLog log;
  IndexAudit audit;
};

namespace detail {

inline std::vector<Label> labels_of(const EpochedDataset& ds, std::span<const std::size_t> idx) {
  std::vector<Label> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(ds.epochs.at(i).label);
  return out;
}

inline std::vector<Label> labels_of(const EpochedDataset& ds) { return labels_of(ds, iota_idx(ds.size())); }

/// Eval-mode accuracy and mean cross-entropy over a whole dataset.
template <typename T>
std::pair<double, double> evaluate(NhgnetModel<T>& model, const EpochedDataset& ds, std::size_t chunk) {
  auto idx = iota_idx(ds.size());
  auto preds = model.predict(ds, idx, chunk);
  std::size_t correct = 0;
  double nll = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Label y = ds.epochs[i].label;
    correct += preds[i].predicted == y;
    nll -= std::log(std::max(preds[i].probs[static_cast<int>(y)], 1e-12));
  }
  return {double(correct) / double(ds.size()), nll / double(ds.size())};
}

/// One pass over `train` in a freshly shuffled order; returns mean batch loss.
template <typename T>
double train_one_epoch(NhgnetModel<T>& model, Adam<T>& opt, const EpochedDataset& train, std::size_t batch_size,
                       std::mt19937_64& rng) {
  auto order = iota_idx(train.size());
  shuffle(order, rng);
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    std::span<const std::size_t> idx(order.data() + s, std::min(batch_size, order.size() - s));
    auto labels = labels_of(train, idx);
    model.zero_grad();
    auto loss = model.loss(model.forward(make_batch<T>(train, idx), Mode::train, &rng), labels);
    backward(loss);
    opt.step();
    total += static_cast<double>(loss.item());
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace detail

/// Trains `init` on `train` (TSR-augmented when enabled) with early stopping
/// on validation accuracy. Returns the best-validation snapshot.
template <typename T>
FitResult<T> fit(const NhgnetModel<T>& init, const EpochedDataset& train, const EpochedDataset& val,
                 const TrainConfig& cfg, std::uint64_t seed, const CheckpointSpec& ckpt = {}) {
  cfg.validate();
  if (train.size() == 0) throw DataError("fit: empty train split");
  if (val.size() == 0) throw DataError("fit: empty validation split");
  const auto start = std::chrono::steady_clock::now();

  IndexAudit audit;
  for (const auto& e : train.epochs) (e.augmented ? audit.augmented : audit.train).insert(e.epoch_id);
  for (const auto& e : val.epochs) {
    audit.val.insert(e.epoch_id);
    if (e.augmented) audit.val_augmented.insert(e.epoch_id);
  }
  for (const auto& id : audit.val) {
    if (audit.train.count(id)) throw DataError("fit: epoch " + id + " is in both train and validation");
  }

  std::mt19937_64 rng(detail::derive_seed(seed, {0x7a1}));
  EpochedDataset augmented;
  const EpochedDataset* fit_set = &train;
  if (cfg.augment) {
    augmented = tsr_augment(train, cfg.tsr, rng);
    for (const auto& e : augmented.epochs)
      if (e.augmented) audit.augmented.insert(e.epoch_id);
    fit_set = &augmented;
  }

  NhgnetModel<T> model = init;
  Adam<T> opt(model.trainable_parameters(), cfg.adam());
  if (ckpt.enabled()) save_model(model, ckpt.path("epoch000"));

  TrainLog log;
  log.seed = seed;
  log.config = {{"model", model.config()}, {"train", cfg}};
  std::optional<NhgnetModel<T>> best;
  EarlyStopping stopper(cfg.patience);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = detail::train_one_epoch(model, opt, *fit_set, cfg.batch_size, rng);
    rec.train_accuracy = detail::evaluate(model, train, cfg.eval_chunk).first;
    std::tie(rec.val_accuracy, rec.val_loss) = detail::evaluate(model, val, cfg.eval_chunk);
    rec.improved = stopper.observe(rec.val_accuracy);
    if (rec.improved) {
      best = model;
      best->set_trained(true);
      if (ckpt.enabled()) save_model(*best, ckpt.path("best"));
    }
    log.epochs.push_back(rec);
    log.stop_epoch = epoch;
    if (stopper.should_stop()) {
      log.stop_reason = "patience";
      break;
    }
  }
  if (log.stop_reason.empty()) log.stop_reason = "max_epochs";
  log.best_epoch = stopper.best_epoch();
  log.best_val_accuracy = stopper.best();
  model.set_trained(true);
  if (ckpt.enabled()) save_model(model, ckpt.path("last"));
  log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(*best), std::move(log), std::move(audit)};
}

// ------------------------------------------------------------ fine-tuning

struct FinetuneResult {
  std::vector<std::size_t> finetune_idx, test_idx;
  double lr = 0;
  std::size_t epochs = 0;
  std::string stop_reason;
  std::vector<double> train_accuracy;
  Metrics metrics;
};

template <typename T>
struct Finetuned {
  NhgnetModel<T> model;
  FinetuneResult result;
};

inline void to_json(nlohmann::json& j, const FinetuneResult& r) {
  j = {{"finetune_idx", r.finetune_idx}, {"test_idx", r.test_idx}, {"lr", r.lr},
       {"epochs", r.epochs}, {"stop_reason", r.stop_reason}, {"train_accuracy", r.train_accuracy},
       {"metrics", r.metrics}};
}

/// Stratified half/half split of the target data: fine-tunes on one half at
/// a tenth of the base learning rate until 100% train accuracy or the epoch
/// cap, then evaluates on the other half.
template <typename T>
Finetuned<T> transfer_finetune(const NhgnetModel<T>& base, const EpochedDataset& target, const TrainConfig& cfg,
                               std::uint64_t seed) {
  cfg.validate();
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& e : target.epochs) ++counts[static_cast<int>(e.label)];
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (counts[c] < 2) {
      throw DataError("transfer_finetune: target has " + std::to_string(counts[c]) + " " +
                      label_name(static_cast<Label>(c)) + " epochs, need at least 2 per class");
    }
  }
  std::mt19937_64 rng(detail::derive_seed(seed, {0xf7}));
  auto labels = detail::labels_of(target);
  auto halves = detail::stratified_parts(detail::iota_idx(target.size()), labels, 2, rng);

  Finetuned<T> out{base, {}};
  auto& r = out.result;
  r.finetune_idx = halves[0];
  r.test_idx = halves[1];
  r.lr = cfg.lr / 10.0;
  AdamOptions a = cfg.adam();
  a.lr = r.lr;
  const EpochedDataset tune = target.subset(r.finetune_idx);
  const EpochedDataset test = target.subset(r.test_idx);
  Adam<T> opt(out.model.trainable_parameters(), a);
  r.stop_reason = "max_epochs";
  for (std::size_t epoch = 1; epoch <= cfg.finetune_max_epochs; ++epoch) {
    detail::train_one_epoch(out.model, opt, tune, cfg.batch_size, rng);
    r.epochs = epoch;
    const double acc = detail::evaluate(out.model, tune, cfg.eval_chunk).first;
    r.train_accuracy.push_back(acc);
    if (acc >= 1.0) {
      r.stop_reason = "train_accuracy";
      break;
    }
  }
  out.model.set_trained(true);
  auto preds = out.model.predict(test, detail::iota_idx(test.size()), cfg.eval_chunk);
  std::vector<Label> predicted;
  for (const auto& p : preds) predicted.push_back(p.predicted);
  r.metrics = compute_metrics(predicted, detail::labels_of(test));
  return out;
}

// ------------------------------------------------------------- nested CV

enum class CvMode { intra, inter };

NLOHMANN_JSON_SERIALIZE_ENUM(CvMode, {{CvMode::intra, "intra"}, {CvMode::inter, "inter"}})

inline CvMode parse_cv_mode(const std::string& s) {
  if (s == "intra") return CvMode::intra;
  if (s == "inter") return CvMode::inter;
  throw ConfigError("unknown mode '" + s + "' (expected intra or inter)");
}

struct InnerResult {
  TrainLog log;
  double val_accuracy = 0;
  double best_train_accuracy = 0;
};

template <typename T>
struct FoldResult {
  std::size_t fold = 0;
  std::string held_out_subject;
  std::vector<std::size_t> test_idx;
  std::vector<InnerResult> inner;
  std::size_t candidate = 0;
  double candidate_train_accuracy = 0;
  Metrics metrics;
  std::optional<FinetuneResult> finetune;
  std::optional<NhgnetModel<T>> model;
  std::vector<IndexAudit> audits;
  bool leakage_free = true;
};

template <typename T>
struct CvResult {
  CvMode mode = CvMode::intra;
  FoldPlan plan;
  std::vector<FoldResult<T>> folds;
  AggregateMetrics aggregate;

  bool leakage_free() const {
    return std::all_of(folds.begin(), folds.end(), [](const auto& f) { return f.leakage_free; });
  }
};

struct CvOptions {
  CheckpointSpec checkpoints;  // dir only; stems are derived per fold
  bool keep_models = true;
  std::function<void(const std::string&)> progress;
};

namespace detail {

inline bool audit_clean(const IndexAudit& a, const EpochedDataset& ds, std::span<const std::size_t> test_idx) {
  if (!a.val_augmented.empty()) return false;
  for (auto i : test_idx)
    if (a.touches(ds.epochs[i].epoch_id) || ds.epochs[i].augmented) return false;
  return true;
}

/// Runs the inner folds on (train, val) pairs and picks the best-val
/// candidate, ties to the lowest inner index.
template <typename T>
void run_inner(FoldResult<T>& fr, const NhgnetConfig& mcfg, const TrainConfig& tcfg, std::uint64_t seed,
               const std::vector<std::pair<EpochedDataset, EpochedDataset>>& splits, const EpochedDataset& ds,
               const CvOptions& opts) {
  std::optional<NhgnetModel<T>> cand;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const std::uint64_t s = derive_seed(seed, {fr.fold, i});
    CheckpointSpec ck;
    if (opts.checkpoints.enabled()) ck = {opts.checkpoints.dir, inner_stem(fr.fold, i)};
    NhgnetModel<T> init(mcfg, s);
    auto res = fit(init, splits[i].first, splits[i].second, tcfg, s, ck);
    InnerResult ir;
    ir.val_accuracy = res.log.best_val_accuracy;
    ir.best_train_accuracy = res.log.epochs.at(res.log.best_epoch - 1).train_accuracy;
    ir.log = std::move(res.log);
    if (!cand || ir.val_accuracy > fr.inner[fr.candidate].val_accuracy) {
      fr.candidate = i;
      cand = std::move(res.model);
    }
    fr.leakage_free = fr.leakage_free && audit_clean(res.audit, ds, fr.test_idx);
    fr.audits.push_back(std::move(res.audit));
    fr.inner.push_back(std::move(ir));
    if (opts.progress) {
      opts.progress(fold_stem(fr.fold) + " inner " + std::to_string(i) + ": val acc " +
                    std::to_string(fr.inner.back().val_accuracy) + " after " +
                    std::to_string(fr.inner.back().log.stop_epoch) + " epochs");
    }
  }
  fr.candidate_train_accuracy = fr.inner[fr.candidate].best_train_accuracy;
  if (opts.checkpoints.enabled()) {
    save_model(*cand, opts.checkpoints.dir / (fold_stem(fr.fold) + "_candidate.nhgn"));
  }
  fr.model = std::move(cand);
}

template <typename F>
void for_each_fold(std::size_t n, bool parallel, F&& body) {
  if (!parallel || n < 2) {
    for (std::size_t f = 0; f < n; ++f) body(f);
    return;
  }
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t f; (f = next++) < n;) {
        try {
          body(f);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Nested cross-validation. Intra: stratified outer folds, inner folds on
/// the outer-train set, candidate evaluated on the outer test set. Inter:
/// one outer fold per held-out subject; the candidate trained on the pooled
/// remaining subjects is fine-tuned on half of the held-out subject and
/// evaluated on the other half.
template <typename T>
CvResult<T> nested_cv(const EpochedDataset& ds, const NhgnetConfig& mcfg, const TrainConfig& tcfg, CvMode mode,
                      std::uint64_t seed, const CvOptions& opts = {}) {
  mcfg.validate();
  tcfg.validate();
  if (ds.n_channels() != mcfg.n_channels || ds.epoch_samples != mcfg.epoch_samples) {
    throw DimensionError("nested_cv: dataset is " + std::to_string(ds.n_channels()) + " channels x " +
                         std::to_string(ds.epoch_samples) + " samples, model expects " +
                         std::to_string(mcfg.n_channels) + " x " + std::to_string(mcfg.epoch_samples));
  }
  for (const auto& e : ds.epochs)
    if (e.augmented) throw DataError("nested_cv: dataset already contains augmented epoch " + e.epoch_id);
  if (opts.checkpoints.enabled()) std::filesystem::create_directories(opts.checkpoints.dir);

  CvResult<T> out;
  out.mode = mode;
  auto labels = detail::labels_of(ds);

  if (mode == CvMode::intra) {
    out.plan = make_fold_plan(labels, seed, tcfg.outer_folds, tcfg.inner_folds);
    out.folds.resize(out.plan.outer_folds.size());
    detail::for_each_fold(out.folds.size(), tcfg.parallel_folds, [&](std::size_t f) {
      const auto& of = out.plan.outer_folds[f];
      auto& fr = out.folds[f];
      fr.fold = f;
      fr.test_idx = of.test_idx;
      std::vector<std::pair<EpochedDataset, EpochedDataset>> splits;
      for (const auto& in : of.inner_folds) splits.emplace_back(ds.subset(in.train_idx), ds.subset(in.val_idx));
      detail::run_inner<T>(fr, mcfg, tcfg, seed, splits, ds, opts);
      const auto test = ds.subset(fr.test_idx);
      auto preds = fr.model->predict(test, detail::iota_idx(test.size()), tcfg.eval_chunk);
      std::vector<Label> predicted;
      for (const auto& p : preds) predicted.push_back(p.predicted);
      fr.metrics = compute_metrics(predicted, detail::labels_of(test));
      if (!opts.keep_models) fr.model.reset();
    });
  } else {
    const auto subjects = ds.subjects();
    if (subjects.size() < 2) throw DataError("nested_cv: inter mode needs at least 2 subjects");
    out.folds.resize(subjects.size());
    detail::for_each_fold(out.folds.size(), tcfg.parallel_folds, [&](std::size_t f) {
      auto& fr = out.folds[f];
      fr.fold = f;
      fr.held_out_subject = subjects[f];
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < ds.size(); ++i)
        (ds.epochs[i].subject_id == subjects[f] ? fr.test_idx : pool).push_back(i);
      std::mt19937_64 rng(detail::derive_seed(seed, {0x1e7, f}));
      auto parts = detail::stratified_parts(pool, labels, tcfg.inner_folds, rng);
      std::vector<std::pair<EpochedDataset, EpochedDataset>> splits;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        std::vector<std::size_t> tr;
        for (std::size_t j = 0; j < parts.size(); ++j)
          if (j != i) tr.insert(tr.end(), parts[j].begin(), parts[j].end());
        std::sort(tr.begin(), tr.end());
        splits.emplace_back(ds.subset(tr), ds.subset(parts[i]));
      }
      detail::run_inner<T>(fr, mcfg, tcfg, seed, splits, ds, opts);
      const auto target = ds.subset(fr.test_idx);
      auto tuned = transfer_finetune(*fr.model, target, tcfg, detail::derive_seed(seed, {0xf7, f}));
      // Map split positions back to dataset indices.
      for (auto& i : tuned.result.finetune_idx) i = fr.test_idx[i];
      for (auto& i : tuned.result.test_idx) i = fr.test_idx[i];
      fr.metrics = tuned.result.metrics;
      fr.finetune = std::move(tuned.result);
      if (opts.checkpoints.enabled()) {
        save_model(tuned.model, opts.checkpoints.dir / (fold_stem(f) + "_finetuned.nhgn"));
      }
      fr.model = opts.keep_models ? std::optional<NhgnetModel<T>>(std::move(tuned.model)) : std::nullopt;
    });
  }
  std::vector<Metrics> rows;
  for (const auto& f : out.folds) rows.push_back(f.metrics);
  out.aggregate = aggregate(rows);
  return out;
}

/// Deterministic summary: per-fold metrics, candidate choice, aggregate.
template <typename T>
nlohmann::json metrics_json(const CvResult<T>& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json row = {{"fold", f.fold},
                          {"candidate_inner_fold", f.candidate},
                          {"candidate_train_accuracy", f.candidate_train_accuracy},
                          {"inner_val_accuracy", nlohmann::json::array()},
                          {"inner_stop_epoch", nlohmann::json::array()},
                          {"test_size", f.test_idx.size()},
                          {"leakage_free", f.leakage_free},
                          {"metrics", f.metrics}};
    for (const auto& in : f.inner) {
      row["inner_val_accuracy"].push_back(in.val_accuracy);
      row["inner_stop_epoch"].push_back(in.log.stop_epoch);
    }
    if (!f.held_out_subject.empty()) row["held_out_subject"] = f.held_out_subject;
    if (f.finetune) row["finetune"] = *f.finetune;
    folds.push_back(std::move(row));
  }
  return {{"mode", r.mode}, {"folds", folds}, {"aggregate", r.aggregate}, {"leakage_free", r.leakage_free()}};
}

/// Per-inner-fold training logs (includes wall time, so not deterministic).
template <typename T>
nlohmann::json train_logs_json(const CvResult<T>& r) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : r.folds)
    for (std::size_t i = 0; i < f.inner.size(); ++i)
      out.push_back({{"fold", f.fold}, {"inner", i}, {"log", f.inner[i].log}});
  return out;
}

}  // namespace nhgnet
