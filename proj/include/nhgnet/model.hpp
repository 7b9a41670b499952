#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nhgnet/eeg_data.hpp"
#include "nhgnet/errors.hpp"
#include "nhgnet/fused.hpp"
#include "nhgnet/ops.hpp"
#include "nhgnet/tensor.hpp"

namespace nhgnet {

enum class AttentionVariant { ef_tanh, ef_softmax, ef_sigmoid, none };
enum class AdjacencyVariant { dynamic_similarity, dynamic_random, fixed_similarity };
enum class Mode { train, eval };

NLOHMANN_JSON_SERIALIZE_ENUM(AttentionVariant, {{AttentionVariant::ef_tanh, "ef_tanh"},
                                                {AttentionVariant::ef_softmax, "ef_softmax"},
                                                {AttentionVariant::ef_sigmoid, "ef_sigmoid"},
                                                {AttentionVariant::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AdjacencyVariant,
                             {{AdjacencyVariant::dynamic_similarity, "dynamic_similarity"},
                              {AdjacencyVariant::dynamic_random, "dynamic_random"},
                              {AdjacencyVariant::fixed_similarity, "fixed_similarity"}})

inline AttentionVariant parse_attention(const std::string& s) {
  if (s == "ef_tanh") return AttentionVariant::ef_tanh;
  if (s == "ef_softmax") return AttentionVariant::ef_softmax;
  if (s == "ef_sigmoid") return AttentionVariant::ef_sigmoid;
  if (s == "none") return AttentionVariant::none;
  throw ConfigError("unknown attention variant '" + s + "'");
}

inline AdjacencyVariant parse_adjacency(const std::string& s) {
  if (s == "dynamic_similarity") return AdjacencyVariant::dynamic_similarity;
  if (s == "dynamic_random") return AdjacencyVariant::dynamic_random;
  if (s == "fixed_similarity") return AdjacencyVariant::fixed_similarity;
  throw ConfigError("unknown adjacency variant '" + s + "'");
}

struct NhgnetConfig {
  std::size_t n_channels = 30;
  std::size_t epoch_samples = 384;
  std::size_t fs = 128;
  std::size_t gcn_out_features = 32;
  AttentionVariant attention = AttentionVariant::ef_tanh;
  AdjacencyVariant adjacency = AdjacencyVariant::dynamic_similarity;
  double dropout_rate = 0.5;
  double lambda1 = 1e-4;
  double lambda2 = 1e-2;
  double leaky_slope = 0.01;
  // When false, biases and BN affine parameters are left out of the L1/L2 terms.
  bool regularize_bias_and_bn = true;

  /// Depthwise kernel lengths fs/2, fs/4, fs/8.
  std::array<std::size_t, 3> branch_kernels() const { return {fs / 2, fs / 4, fs / 8}; }
  std::size_t pool_kernel() const { return fs / 2; }
  std::size_t pooled_samples() const { return epoch_samples - pool_kernel() + 1; }

  void validate() const {
    if (n_channels == 0) throw ConfigError("config: n_channels must be >= 1");
    if (fs < 8 || fs % 8 != 0) {
      throw ConfigError("config: fs must be a positive multiple of 8 so that fs/2, fs/4 and "
                        "fs/8 are whole kernel lengths, got " + std::to_string(fs));
    }
    if (pool_kernel() > epoch_samples) {
      throw ConfigError("config: fs/2 = " + std::to_string(pool_kernel()) +
                        " exceeds epoch_samples = " + std::to_string(epoch_samples));
    }
    if (gcn_out_features == 0) throw ConfigError("config: gcn_out_features must be >= 1");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw ConfigError("config: dropout_rate must lie in [0, 1)");
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("config: lambda1/lambda2 must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const NhgnetConfig& c) {
  j = {{"n_channels", c.n_channels},
       {"epoch_samples", c.epoch_samples},
       {"fs", c.fs},
       {"gcn_out_features", c.gcn_out_features},
       {"attention", c.attention},
       {"adjacency", c.adjacency},
       {"dropout_rate", c.dropout_rate},
       {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},
       {"leaky_slope", c.leaky_slope},
       {"regularize_bias_and_bn", c.regularize_bias_and_bn}};
}

inline void from_json(const nlohmann::json& j, NhgnetConfig& c) {
  c.n_channels = j.value("n_channels", c.n_channels);
  c.epoch_samples = j.value("epoch_samples", c.epoch_samples);
  c.fs = j.value("fs", c.fs);
  c.gcn_out_features = j.value("gcn_out_features", c.gcn_out_features);
  if (j.contains("attention")) c.attention = parse_attention(j.at("attention").get<std::string>());
  if (j.contains("adjacency")) c.adjacency = parse_adjacency(j.at("adjacency").get<std::string>());
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.regularize_bias_and_bn = j.value("regularize_bias_and_bn", c.regularize_bias_and_bn);
}

/// Named trainable tensor. Copying a Parameter deep-copies its values, so
/// copying a model yields an independent snapshot.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool regularizable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t, bool reg = true)
      : name(std::move(n)), tensor(std::move(t)), regularizable(reg) {
    tensor.set_requires_grad(true);
  }
  Parameter(const Parameter& o) : name(o.name), tensor(o.tensor.clone()), regularizable(o.regularizable) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) {
      name = o.name;
      tensor = o.tensor.clone();
      regularizable = o.regularizable;
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  bool trainable() const { return tensor.requires_grad(); }
};

/// Named non-trainable state (BN running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T> values;
};

/// Intermediates captured by forward(); empty tensors when not produced.
template <typename T>
struct ForwardTrace {
  Tensor<T> D, W_A, H, P, G_raw, G_detail, S_base, M, S_overall, S, G_overall, logits, probs;
};

struct Prediction {
  std::array<double, kNumClasses> probs{};
  Label predicted = Label::vigilance;
  double confidence = 0.0;
};

/// Packs epochs into a [B, N, T] tensor.
template <typename T>
Tensor<T> make_batch(const EpochedDataset& ds, std::span<const std::size_t> idx) {
  const std::size_t N = ds.n_channels(), len = ds.epoch_samples;
  Tensor<T> x({idx.size(), N, len});
  auto& v = x.values();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& d = ds.epochs.at(idx[b]).data;
    std::copy(d.begin(), d.end(), v.begin() + static_cast<long>(b * N * len));
  }
  return x;
}

template <typename T>
Tensor<T> one_hot(std::span<const Label> labels) {
  Tensor<T> y({labels.size(), kNumClasses});
  for (std::size_t i = 0; i < labels.size(); ++i) y[i * kNumClasses + static_cast<int>(labels[i])] = T(1);
  return y;
}

/// Cross-entropy of softmax(logits) against one-hot targets, averaged over
/// the batch, with probabilities clamped to >= 1e-12.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.ndim() != 2 || logits.shape() != targets.shape()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    T total = 0;
    for (std::size_t c = 0; c < C; ++c) {
      T v = targets[b * C + c];
      if (v != T(0) && v != T(1)) throw DataError("cross_entropy: label row is not one-hot");
      total += v;
    }
    if (total != T(1)) throw DataError("cross_entropy: label row is not one-hot");
  }
  auto log_probs = log_clamped(softmax(logits, 1), T(1e-12));
  return scale(sum(mul(log_probs, targets)), T(-1) / static_cast<T>(B));
}

/// The full architecture: multiscale depthwise temporal convolution,
/// exact-fit attention gate, log-energy layer, per-node linear map, the
/// trainable similarity adjacency with symmetric mask, and a linear
/// classifier.
template <typename T>
class NhgnetModel {
 public:
  using Rng = std::mt19937_64;

  NhgnetModel(const NhgnetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t N = cfg_.n_channels, F = cfg_.gcn_out_features;
    const std::size_t T1 = cfg_.pooled_samples();
    const bool reg_aux = cfg_.regularize_bias_and_bn;
    const auto kernels = cfg_.branch_kernels();
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string prefix = "temporal.branch" + std::to_string(i + 1);
      branch_w_[i] = Parameter<T>(prefix + ".weight",
                                  uniform({N, kernels[i]}, 1.0 / std::sqrt(double(kernels[i])), rng));
      branch_b_[i] = Parameter<T>(prefix + ".bias", Tensor<T>::zeros({N}), reg_aux);
    }
    attn_w_ = Parameter<T>("temporal.attention.weight", uniform({3, 3}, 1.0 / std::sqrt(3.0), rng));
    attn_b_ = Parameter<T>("temporal.attention.bias", Tensor<T>::zeros({3}), reg_aux);
    temporal_bn_w_ = Parameter<T>("temporal.bn.weight", Tensor<T>::ones({3}), reg_aux);
    temporal_bn_b_ = Parameter<T>("temporal.bn.bias", Tensor<T>::zeros({3}), reg_aux);
    temporal_rm_ = {"temporal.bn.running_mean", std::vector<T>(3, T(0))};
    temporal_rv_ = {"temporal.bn.running_var", std::vector<T>(3, T(1))};
    w_detail_ = Parameter<T>("spatial.w_detail", xavier({3 * T1, F}, rng));
    b_detail_ = Parameter<T>("spatial.b_detail", Tensor<T>::zeros({F}), reg_aux);
    m_base_ = Parameter<T>("spatial.m_base", xavier({N, N}, rng));
    if (cfg_.adjacency == AdjacencyVariant::fixed_similarity) {
      m_base_.tensor.set_requires_grad(false);
    }
    if (cfg_.adjacency == AdjacencyVariant::dynamic_random) {
      s_random_ = Parameter<T>("spatial.s_random", xavier({N, N}, rng));
    }
    cls_bn_w_ = Parameter<T>("classifier.bn.weight", Tensor<T>::ones({F}), reg_aux);
    cls_bn_b_ = Parameter<T>("classifier.bn.bias", Tensor<T>::zeros({F}), reg_aux);
    cls_rm_ = {"classifier.bn.running_mean", std::vector<T>(F, T(0))};
    cls_rv_ = {"classifier.bn.running_var", std::vector<T>(F, T(1))};
    cls_w_ = Parameter<T>("classifier.weight", xavier({N * F, kNumClasses}, rng));
    cls_b_ = Parameter<T>("classifier.bias", Tensor<T>::zeros({kNumClasses}), reg_aux);
  }

  const NhgnetConfig& config() const { return cfg_; }

  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  /// Every parameter in declaration order (the serialization order).
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (std::size_t i = 0; i < 3; ++i) {
      out.push_back(&branch_w_[i]);
      out.push_back(&branch_b_[i]);
    }
    for (auto* p : {&attn_w_, &attn_b_, &temporal_bn_w_, &temporal_bn_b_, &w_detail_, &b_detail_,
                    &m_base_}) {
      out.push_back(p);
    }
    if (s_random_) out.push_back(&*s_random_);
    for (auto* p : {&cls_bn_w_, &cls_bn_b_, &cls_w_, &cls_b_}) out.push_back(p);
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    auto ps = const_cast<NhgnetModel*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* p : parameters())
      if (p->trainable()) out.push_back(p);
    return out;
  }

  std::vector<Buffer<T>*> buffers() { return {&temporal_rm_, &temporal_rv_, &cls_rm_, &cls_rv_}; }
  std::vector<const Buffer<T>*> buffers() const {
    return {&temporal_rm_, &temporal_rv_, &cls_rm_, &cls_rv_};
  }

  Parameter<T>* find_parameter(const std::string& name) {
    for (auto* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->tensor.zero_grad();
  }

  /// x [B, N, T] -> P [B, N, T1, 3].
  Tensor<T> temporal_forward(const Tensor<T>& x, Mode mode, ForwardTrace<T>* trace = nullptr) {
    check_input(x);
    std::vector<Tensor<T>> weights, biases;
    for (std::size_t i = 0; i < 3; ++i) {
      weights.push_back(branch_w_[i].tensor);
      biases.push_back(branch_b_[i].tensor);
    }
    Tensor<T> D = multiscale_depthwise_conv(x, weights, biases);
    Tensor<T> H = D, W_A;
    if (cfg_.attention != AttentionVariant::none) {
      GateActivation act = GateActivation::tanh;
      if (cfg_.attention == AttentionVariant::ef_sigmoid) act = GateActivation::sigmoid;
      if (cfg_.attention == AttentionVariant::ef_softmax) act = GateActivation::softmax;
      H = attention_gate(D, attn_w_.tensor, attn_b_.tensor, act, trace ? &W_A : nullptr);
    }
    Tensor<T> normed = batchnorm(H, temporal_bn_w_.tensor, temporal_bn_b_.tensor,
                                 std::span<T>(temporal_rm_.values), std::span<T>(temporal_rv_.values),
                                 mode == Mode::train);
    Tensor<T> P = log_energy(normed, static_cast<T>(cfg_.leaky_slope), cfg_.pool_kernel(), T(1e-12));
    if (trace) {
      trace->D = D;
      trace->W_A = W_A;
      trace->H = H;
      trace->P = P;
    }
    return P;
  }

  /// P [B, N, T1, 3] -> logits [B, 2].
  Tensor<T> spatial_forward(const Tensor<T>& P, Mode mode, Rng* dropout_rng,
                            ForwardTrace<T>* trace = nullptr) {
    const std::size_t N = cfg_.n_channels, T1 = cfg_.pooled_samples();
    if (P.ndim() != 4 || P.dim(1) != N || P.dim(2) != T1 || P.dim(3) != 3) {
      throw DimensionError("spatial_forward: expected P [B," + std::to_string(N) + "," +
                           std::to_string(T1) + ",3], got " + shape_str(P.shape()));
    }
    const std::size_t B = P.dim(0), F = cfg_.gcn_out_features;
    // Node feature vector: branch-major, time-minor.
    Tensor<T> G_raw = reshape(transpose_last2(P), {B, N, 3 * T1});
    Tensor<T> G_detail = add(matmul(G_raw, w_detail_.tensor), b_detail_.tensor);
    Tensor<T> G_overall = graph_propagate(G_detail, trace);
    Tensor<T> normed = batchnorm(G_overall, cls_bn_w_.tensor, cls_bn_b_.tensor,
                                 std::span<T>(cls_rm_.values), std::span<T>(cls_rv_.values),
                                 mode == Mode::train);
    Tensor<T> flat = reshape(normed, {B, N * F});
    if (mode == Mode::train && cfg_.dropout_rate > 0) {
      if (!dropout_rng) throw std::logic_error("spatial_forward: training needs a dropout rng");
      flat = dropout(flat, cfg_.dropout_rate, true, *dropout_rng);
    }
    Tensor<T> logits = add(matmul(flat, cls_w_.tensor), cls_b_.tensor);
    if (trace) {
      trace->G_raw = G_raw;
      trace->G_detail = G_detail;
      trace->logits = logits;
      NoGradGuard no_grad;
      trace->probs = softmax(logits, 1);
    }
    return logits;
  }

  /// Adjacency construction and one propagation step: G_detail [B, N, F]
  /// -> G_overall = S * G_detail.
  Tensor<T> graph_propagate(const Tensor<T>& G_detail, ForwardTrace<T>* trace = nullptr) {
    const std::size_t N = cfg_.n_channels;
    if (G_detail.ndim() != 3 || G_detail.dim(1) != N) {
      throw DimensionError("graph_propagate: expected [B," + std::to_string(N) + ",F], got " +
                           shape_str(G_detail.shape()));
    }
    Tensor<T> S_base = s_random_ ? scale(add(s_random_->tensor, transpose_last2(s_random_->tensor)), T(0.5))
                                 : matmul(G_detail, transpose_last2(G_detail));
    Tensor<T> M = add(m_base_.tensor, transpose_last2(m_base_.tensor));
    Tensor<T> S_overall = add(relu(mul(S_base, M)), identity(N));
    Tensor<T> S = degree_normalize(S_overall);
    Tensor<T> G_overall = matmul(S, G_detail);
    if (trace) {
      trace->S_base = S_base;
      trace->M = M;
      trace->S_overall = S_overall;
      trace->S = S;
      trace->G_overall = G_overall;
    }
    return G_overall;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng* dropout_rng = nullptr,
                    ForwardTrace<T>* trace = nullptr) {
    return spatial_forward(temporal_forward(x, mode, trace), mode, dropout_rng, trace);
  }

  /// lambda1 * sum|theta| + lambda2 * sum theta^2 over regularizable,
  /// trainable parameters.
  Tensor<T> regularization() {
    Tensor<T> total = Tensor<T>::scalar(T(0));
    if (cfg_.lambda1 == 0 && cfg_.lambda2 == 0) return total;
    for (auto* p : trainable_parameters()) {
      if (!p->regularizable) continue;
      if (cfg_.lambda1 != 0) total = add(total, scale(sum(abs(p->tensor)), static_cast<T>(cfg_.lambda1)));
      if (cfg_.lambda2 != 0) total = add(total, scale(sum(square(p->tensor)), static_cast<T>(cfg_.lambda2)));
    }
    return total;
  }

  /// Cross-entropy of softmax(logits) plus the L1/L2 penalty.
  Tensor<T> loss(const Tensor<T>& logits, const Tensor<T>& one_hot_targets) {
    return add(cross_entropy(logits, one_hot_targets), regularization());
  }

  Tensor<T> loss(const Tensor<T>& logits, std::span<const Label> labels) {
    return loss(logits, one_hot<T>(labels));
  }

  /// Eval-mode prediction; ties resolve to the lower class index.
  std::vector<Prediction> predict(const Tensor<T>& x) {
    NoGradGuard no_grad;
    Tensor<T> probs = softmax(forward(x, Mode::eval), 1);
    std::vector<Prediction> out(probs.dim(0));
    for (std::size_t b = 0; b < out.size(); ++b) {
      for (std::size_t c = 0; c < kNumClasses; ++c) out[b].probs[c] = probs[b * kNumClasses + c];
      const bool fatigue = out[b].probs[1] > out[b].probs[0];
      out[b].predicted = fatigue ? Label::fatigue : Label::vigilance;
      out[b].confidence = out[b].probs[fatigue ? 1 : 0];
    }
    return out;
  }

  /// Predictions for the given dataset rows, evaluated in chunks.
  std::vector<Prediction> predict(const EpochedDataset& ds, std::span<const std::size_t> idx,
                                  std::size_t chunk = 256) {
    std::vector<Prediction> out;
    out.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); i += chunk) {
      auto part = idx.subspan(i, std::min(chunk, idx.size() - i));
      auto preds = predict(make_batch<T>(ds, part));
      out.insert(out.end(), preds.begin(), preds.end());
    }
    return out;
  }

 private:
  static Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
    return t;
  }

  static Tensor<T> xavier(Shape shape, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    return uniform(std::move(shape), bound, rng);
  }

  static Tensor<T> identity(std::size_t n) {
    Tensor<T> eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = T(1);
    return eye;
  }

  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 3 || x.dim(1) != cfg_.n_channels || x.dim(2) != cfg_.epoch_samples) {
      throw DimensionError("model input must be [B, " + std::to_string(cfg_.n_channels) + ", " +
                           std::to_string(cfg_.epoch_samples) + "], got " + shape_str(x.shape()));
    }
    if (x.dim(0) == 0) throw DimensionError("model input has an empty batch");
  }

  NhgnetConfig cfg_;
  bool trained_ = false;
  std::array<Parameter<T>, 3> branch_w_, branch_b_;
  Parameter<T> attn_w_, attn_b_;
  Parameter<T> temporal_bn_w_, temporal_bn_b_;
  Buffer<T> temporal_rm_, temporal_rv_;
  Parameter<T> w_detail_, b_detail_;
  Parameter<T> m_base_;
  std::optional<Parameter<T>> s_random_;
  Parameter<T> cls_bn_w_, cls_bn_b_;
  Buffer<T> cls_rm_, cls_rv_;
  Parameter<T> cls_w_, cls_b_;
};

}  // namespace nhgnet
