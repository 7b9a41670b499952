#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "nhgnet/model.hpp"
#include "nhgnet/model_io.hpp"
#include "test_util.hpp"

using namespace nhgnet;
using nhgnet::testing::TempDir;

namespace {

NhgnetConfig small_config() {
  NhgnetConfig c;
  c.n_channels = 4;
  c.epoch_samples = 32;
  c.fs = 16;
  c.gcn_out_features = 3;
  return c;
}

template <typename T>
Tensor<T> random_input(const NhgnetConfig& c, std::size_t B, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<T> x({B, c.n_channels, c.epoch_samples});
  for (auto& v : x.values()) v = static_cast<T>(n(rng));
  return x;
}

template <typename T>
void fill(Parameter<T>* p, T value) {
  std::fill(p->tensor.values().begin(), p->tensor.values().end(), value);
}

}  // namespace

TEST(ModelConfig, BranchKernelsFollowSamplingRate) {
  NhgnetConfig c;
  auto k = c.branch_kernels();
  EXPECT_EQ(k[0], 64u);
  EXPECT_EQ(k[1], 32u);
  EXPECT_EQ(k[2], 16u);
  EXPECT_EQ(c.pooled_samples(), 321u);
}

TEST(ModelConfig, RejectsInvalid) {
  auto c = small_config();
  c.fs = 12;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.epoch_samples = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.lambda1 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.dropout_rate = 1.0;
  EXPECT_THROW((NhgnetModel<float>(c, 1)), ConfigError);
  EXPECT_THROW(parse_attention("tanh"), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = small_config();
  c.attention = AttentionVariant::ef_softmax;
  c.adjacency = AdjacencyVariant::dynamic_random;
  c.lambda1 = 0.25;
  nlohmann::json j = c;
  auto back = j.get<NhgnetConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(j["attention"], "ef_softmax");
}

TEST(Model, ShapeChainAtDefaultSize) {
  NhgnetConfig c;
  NhgnetModel<float> m(c, 3);
  auto x = random_input<float>(c, 2, 1);
  ForwardTrace<float> tr;
  std::mt19937_64 rng(1);
  auto logits = m.forward(x, Mode::train, &rng, &tr);
  EXPECT_EQ(tr.D.shape(), (Shape{2, 30, 384, 3}));
  EXPECT_EQ(tr.W_A.shape(), (Shape{2, 30, 384, 3}));
  EXPECT_EQ(tr.H.shape(), (Shape{2, 30, 384, 3}));
  EXPECT_EQ(tr.P.shape(), (Shape{2, 30, 321, 3}));
  EXPECT_EQ(tr.G_raw.shape(), (Shape{2, 30, 963}));
  EXPECT_EQ(tr.G_detail.shape(), (Shape{2, 30, 32}));
  EXPECT_EQ(tr.S.shape(), (Shape{2, 30, 30}));
  EXPECT_EQ(tr.G_overall.shape(), (Shape{2, 30, 32}));
  EXPECT_EQ(logits.shape(), (Shape{2, 2}));
  EXPECT_EQ(m.find_parameter("spatial.w_detail")->tensor.shape(), (Shape{963, 32}));
  EXPECT_EQ(m.find_parameter("classifier.weight")->tensor.shape(), (Shape{960, 2}));
  EXPECT_EQ(m.find_parameter("temporal.branch3.weight")->tensor.shape(), (Shape{30, 16}));
}

TEST(Model, GRawIsBranchMajorTimeMinor) {
  auto c = small_config();
  NhgnetModel<double> m(c, 1);
  ForwardTrace<double> tr;
  m.forward(random_input<double>(c, 1, 2), Mode::eval, nullptr, &tr);
  const std::size_t T1 = c.pooled_samples();
  for (std::size_t n = 0; n < c.n_channels; ++n)
    for (std::size_t br = 0; br < 3; ++br)
      for (std::size_t t = 0; t < T1; ++t)
        EXPECT_EQ(tr.G_raw[n * 3 * T1 + br * T1 + t], tr.P[(n * T1 + t) * 3 + br]);
}

TEST(Model, IdentityKernelsGiveLogEnergyOfConstant) {
  auto c = small_config();
  c.attention = AttentionVariant::none;
  NhgnetModel<double> m(c, 1);
  for (int i = 1; i <= 3; ++i) {
    auto* w = m.find_parameter("temporal.branch" + std::to_string(i) + ".weight");
    fill(w, 0.0);
    const std::size_t k = w->tensor.dim(1), pad = same_pad_left(k);
    for (std::size_t n = 0; n < c.n_channels; ++n) w->tensor[n * k + pad] = 1.0;
  }
  Tensor<double> x({1, c.n_channels, c.epoch_samples}, 10.0);
  auto P = m.temporal_forward(x, Mode::eval);
  // BN eval divides by sqrt(1 + eps).
  const double expected = std::log10(100.0 / (1.0 + 1e-5));
  for (double v : P.values()) EXPECT_NEAR(v, expected, 1e-12);
  EXPECT_NEAR(expected, 2.0, 1e-5);
}

TEST(Model, ZeroAttentionGateFloorsLogEnergy) {
  auto c = small_config();
  NhgnetModel<double> m(c, 1);
  fill(m.find_parameter("temporal.attention.weight"), 0.0);
  fill(m.find_parameter("temporal.attention.bias"), 0.0);
  ForwardTrace<double> tr;
  auto P = m.temporal_forward(random_input<double>(c, 2, 3), Mode::eval, &tr);
  for (double v : tr.W_A.values()) EXPECT_EQ(v, 0.0);
  for (double v : P.values()) EXPECT_NEAR(v, -12.0, 1e-12);
}

TEST(Model, OrthonormalDetailRowsGiveIdentityAdjacency) {
  auto c = small_config();
  c.gcn_out_features = c.n_channels;
  NhgnetModel<double> m(c, 1);
  fill(m.find_parameter("spatial.m_base"), 0.5);  // M = all ones
  Tensor<double> G({1, c.n_channels, c.n_channels});
  for (std::size_t i = 0; i < c.n_channels; ++i) G[i * c.n_channels + i] = 1.0;
  ForwardTrace<double> tr;
  auto out = m.graph_propagate(G, &tr);
  for (std::size_t i = 0; i < c.n_channels; ++i)
    for (std::size_t j = 0; j < c.n_channels; ++j) {
      const std::size_t k = i * c.n_channels + j;
      EXPECT_DOUBLE_EQ(tr.S_base[k], i == j ? 1.0 : 0.0);
      EXPECT_DOUBLE_EQ(tr.S_overall[k], i == j ? 2.0 : 0.0);
      EXPECT_DOUBLE_EQ(tr.S[k], i == j ? 1.0 : 0.0);
      EXPECT_DOUBLE_EQ(out[k], G[k]);
    }
}

TEST(Model, TwoNodeAdjacencyNormalisation) {
  auto c = small_config();
  c.n_channels = 2;
  c.gcn_out_features = 1;
  NhgnetModel<double> m(c, 1);
  fill(m.find_parameter("spatial.m_base"), 0.5);
  Tensor<double> G({1, 2, 1}, std::vector<double>{1.0, 1.0});
  ForwardTrace<double> tr;
  m.graph_propagate(G, &tr);
  const double want_overall[] = {2, 1, 1, 2};
  const double want_s[] = {2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3};
  for (int k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(tr.S_overall[k], want_overall[k]);
    EXPECT_NEAR(tr.S[k], want_s[k], 1e-15);
  }
}

class ModelSeeds : public ::testing::TestWithParam<int> {};

TEST_P(ModelSeeds, AdjacencyAlgebra) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  NhgnetConfig c;
  c.n_channels = 8;
  c.epoch_samples = 64;
  c.fs = 32;
  c.gcn_out_features = 5;
  NhgnetModel<float> m(c, seed);
  ForwardTrace<float> tr;
  m.forward(random_input<float>(c, 3, seed + 100), Mode::eval, nullptr, &tr);
  const std::size_t N = c.n_channels;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) EXPECT_EQ(tr.M[i * N + j], tr.M[j * N + i]);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t off = b * N * N;
    for (std::size_t i = 0; i < N; ++i) {
      EXPECT_GE(tr.S_overall[off + i * N + i], 1.0f);
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t ij = off + i * N + j, ji = off + j * N + i;
        const float scale = std::max(1.0f, std::abs(tr.S_base[ij]));
        EXPECT_LE(std::abs(tr.S_base[ij] - tr.S_base[ji]) / scale, 1e-5f);
        EXPECT_GE(tr.S_overall[ij], 0.0f);
        EXPECT_LE(std::abs(tr.S[ij] - tr.S[ji]), 1e-5f);
      }
    }
  }
}

TEST_P(ModelSeeds, AttentionRanges) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto c = small_config();
  for (auto variant : {AttentionVariant::ef_tanh, AttentionVariant::ef_sigmoid, AttentionVariant::ef_softmax}) {
    c.attention = variant;
    NhgnetModel<double> m(c, seed);
    // Larger gate weights push activations towards saturation.
    for (auto& v : m.find_parameter("temporal.attention.weight")->tensor.values()) v *= 4;
    ForwardTrace<double> tr;
    m.temporal_forward(random_input<double>(c, 2, seed), Mode::eval, &tr);
    const auto& w = tr.W_A.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (variant == AttentionVariant::ef_tanh) {
        EXPECT_GT(w[i], -1.0);
        EXPECT_LT(w[i], 1.0);
      } else if (variant == AttentionVariant::ef_sigmoid) {
        EXPECT_GT(w[i], 0.0);
        EXPECT_LT(w[i], 1.0);
      }
    }
    if (variant == AttentionVariant::ef_softmax) {
      for (std::size_t i = 0; i < w.size(); i += 3) EXPECT_NEAR(w[i] + w[i + 1] + w[i + 2], 1.0, 1e-12);
    }
  }
}

TEST_P(ModelSeeds, ChannelLocalityUpToGRaw) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto c = small_config();
  NhgnetModel<double> m(c, seed);
  auto x = random_input<double>(c, 1, seed);
  ForwardTrace<double> a, b;
  m.forward(x, Mode::eval, nullptr, &a);
  const std::size_t j = static_cast<std::size_t>(GetParam()) % c.n_channels;
  for (std::size_t t = 0; t < c.epoch_samples; ++t) x[j * c.epoch_samples + t] = 0.0;
  m.forward(x, Mode::eval, nullptr, &b);
  const std::size_t row = 3 * c.pooled_samples();
  bool changed = false;
  for (std::size_t n = 0; n < c.n_channels; ++n)
    for (std::size_t k = 0; k < row; ++k) {
      if (n == j) {
        changed |= a.G_raw[n * row + k] != b.G_raw[n * row + k];
      } else {
        EXPECT_EQ(a.G_raw[n * row + k], b.G_raw[n * row + k]);
      }
    }
  EXPECT_TRUE(changed);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ModelSeeds, ::testing::Values(1, 2, 3, 4, 5));

TEST(Model, FixedSimilarityFreezesMask) {
  auto c = small_config();
  c.adjacency = AdjacencyVariant::fixed_similarity;
  NhgnetModel<double> m(c, 1);
  auto* mb = m.find_parameter("spatial.m_base");
  EXPECT_FALSE(mb->trainable());
  for (auto* p : m.trainable_parameters()) EXPECT_NE(p->name, "spatial.m_base");
  const auto before = mb->tensor.values();
  auto x = random_input<double>(c, 4, 1);
  std::vector<Label> y{Label::vigilance, Label::fatigue, Label::vigilance, Label::fatigue};
  std::mt19937_64 rng(1);
  for (int step = 0; step < 3; ++step) {
    m.zero_grad();
    backward(m.loss(m.forward(x, Mode::train, &rng), std::span<const Label>(y)));
    for (auto* p : m.trainable_parameters()) {
      auto& v = p->tensor.values();
      const auto& g = p->tensor.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.01 * g[i];
    }
  }
  EXPECT_EQ(mb->tensor.values(), before);
  EXPECT_FALSE(mb->tensor.has_grad());
}

TEST(Model, DynamicRandomUsesSharedSymmetricMatrix) {
  auto c = small_config();
  c.adjacency = AdjacencyVariant::dynamic_random;
  NhgnetModel<double> m(c, 1);
  ASSERT_NE(m.find_parameter("spatial.s_random"), nullptr);
  ForwardTrace<double> tr;
  auto logits = m.forward(random_input<double>(c, 3, 1), Mode::eval, nullptr, &tr);
  EXPECT_EQ(tr.S_base.shape(), (Shape{4, 4}));
  EXPECT_EQ(logits.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(tr.S_base[i * 4 + j], tr.S_base[j * 4 + i]);
  EXPECT_EQ(NhgnetModel<double>(small_config(), 1).find_parameter("spatial.s_random"), nullptr);
}

TEST(Model, EndToEndGradientCheck) {
  for (auto adj : {AdjacencyVariant::dynamic_similarity, AdjacencyVariant::dynamic_random}) {
    for (auto att : {AttentionVariant::ef_tanh, AttentionVariant::ef_softmax, AttentionVariant::ef_sigmoid,
                     AttentionVariant::none}) {
      auto c = small_config();
      c.adjacency = adj;
      c.attention = att;
      NhgnetModel<double> m(c, 11);
      auto x = random_input<double>(c, 4, 5);
      std::vector<Label> y{Label::vigilance, Label::fatigue, Label::fatigue, Label::vigilance};
      auto f = [&] {
        std::mt19937_64 rng(7);  // same dropout mask every evaluation
        return m.loss(m.forward(x, Mode::train, &rng), std::span<const Label>(y));
      };
      // Sample 20 scalar parameters across the whole parameter set.
      m.zero_grad();
      backward(f());
      auto params = m.trainable_parameters();
      std::vector<std::pair<std::size_t, std::size_t>> picks;
      std::mt19937_64 pick_rng(3);
      for (int k = 0; k < 20; ++k) {
        const std::size_t p = pick_rng() % params.size();
        picks.emplace_back(p, pick_rng() % params[p]->tensor.size());
      }
      double worst = 0;
      NoGradGuard no_grad;
      for (auto [p, i] : picks) {
        const double analytic = params[p]->tensor.grad()[i];
        auto& v = params[p]->tensor.values();
        const double saved = v[i], h = 1e-6;
        v[i] = saved + h;
        const double up = f().item();
        v[i] = saved - h;
        const double down = f().item();
        v[i] = saved;
        worst = std::max(worst, nhgnet::testing::rel_error(analytic, (up - down) / (2 * h)));
      }
      EXPECT_LT(worst, 1e-4) << "attention " << nlohmann::json(att) << " adjacency " << nlohmann::json(adj);
    }
  }
}

TEST(Loss, ConfidentCorrectIsNearZero) {
  Tensor<double> logits({1, 2}, std::vector<double>{20, -20});
  Tensor<double> y({1, 2}, std::vector<double>{1, 0});
  EXPECT_LT(cross_entropy(logits, y).item(), 1e-8);
}

TEST(Loss, UniformPredictionIsLn2) {
  Tensor<double> logits({1, 2}, std::vector<double>{0, 0});
  Tensor<double> y({1, 2}, std::vector<double>{1, 0});
  EXPECT_NEAR(cross_entropy(logits, y).item(), std::log(2.0), 1e-15);
}

TEST(Loss, RejectsNonOneHot) {
  Tensor<double> logits({1, 2});
  EXPECT_THROW(cross_entropy(logits, Tensor<double>({1, 2}, std::vector<double>{0.5, 0.5})), DataError);
  EXPECT_THROW(cross_entropy(logits, Tensor<double>({1, 2}, std::vector<double>{1, 1})), DataError);
  EXPECT_THROW(cross_entropy(logits, Tensor<double>({2, 2})), DimensionError);
}

TEST(Loss, RegularisationArithmetic) {
  auto c = small_config();
  NhgnetModel<double> m(c, 1);
  for (auto* p : m.parameters()) fill(p, 0.0);
  m.find_parameter("classifier.bias")->tensor[0] = 2.0;
  EXPECT_NEAR(m.regularization().item(), 1e-4 * 2 + 1e-2 * 4, 1e-15);
  Tensor<double> logits({1, 2}, std::vector<double>{20, -20});
  std::vector<Label> y{Label::vigilance};
  EXPECT_NEAR(m.loss(logits, std::span<const Label>(y)).item(), 0.0402, 1e-12);

  c.regularize_bias_and_bn = false;
  NhgnetModel<double> m2(c, 1);
  for (auto* p : m2.parameters()) fill(p, 0.0);
  m2.find_parameter("classifier.bias")->tensor[0] = 2.0;
  EXPECT_EQ(m2.regularization().item(), 0.0);
}

TEST(Predict, DeterministicAndNormalised) {
  auto c = small_config();
  NhgnetModel<float> m(c, 2);
  auto x = random_input<float>(c, 5, 9);
  auto a = m.predict(x);
  auto b = m.predict(x);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].probs, b[i].probs);
    EXPECT_EQ(a[i].predicted, b[i].predicted);
    EXPECT_NEAR(a[i].probs[0] + a[i].probs[1], 1.0, 1e-6);
    EXPECT_GE(a[i].probs[0], 0.0);
    EXPECT_EQ(a[i].confidence, std::max(a[i].probs[0], a[i].probs[1]));
  }
}

TEST(Predict, TieGoesToClassZero) {
  auto c = small_config();
  NhgnetModel<double> m(c, 2);
  fill(m.find_parameter("classifier.weight"), 0.0);
  fill(m.find_parameter("classifier.bias"), 1.0);
  auto p = m.predict(random_input<double>(c, 3, 1));
  for (const auto& pr : p) {
    EXPECT_EQ(pr.predicted, Label::vigilance);
    EXPECT_EQ(pr.confidence, 0.5);
  }
}

TEST(Predict, ShapeMismatchThrows) {
  auto c = small_config();
  NhgnetModel<float> m(c, 2);
  EXPECT_THROW(m.predict(Tensor<float>({1, 5, 32})), DimensionError);
  EXPECT_THROW(m.predict(Tensor<float>({1, 4, 31})), DimensionError);
}

TEST(Model, CopyIsDeepSnapshot) {
  auto c = small_config();
  NhgnetModel<double> m(c, 2);
  NhgnetModel<double> snap = m;
  m.find_parameter("classifier.bias")->tensor[0] = 42.0;
  m.buffers()[0]->values[0] = 7.0;
  EXPECT_EQ(snap.find_parameter("classifier.bias")->tensor[0], 0.0);
  EXPECT_EQ(snap.buffers()[0]->values[0], 0.0);
  EXPECT_TRUE(snap.find_parameter("classifier.bias")->trainable());
}

TEST(Model, TrainModeUpdatesRunningStats) {
  auto c = small_config();
  NhgnetModel<double> m(c, 2);
  std::mt19937_64 rng(1);
  m.forward(random_input<double>(c, 2, 1), Mode::train, &rng);
  EXPECT_NE(m.buffers()[0]->values, std::vector<double>(3, 0.0));
  NhgnetModel<double> fresh(c, 2);
  auto before = fresh.buffers()[0]->values;
  fresh.forward(random_input<double>(c, 2, 1), Mode::eval);
  EXPECT_EQ(fresh.buffers()[0]->values, before);
}

template <typename T>
class ModelIo : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(ModelIo, Scalars);

TYPED_TEST(ModelIo, SaveLoadSaveIsByteIdentical) {
  using T = TypeParam;
  TempDir dir;
  for (auto adj : {AdjacencyVariant::dynamic_similarity, AdjacencyVariant::dynamic_random,
                   AdjacencyVariant::fixed_similarity}) {
    auto c = small_config();
    c.adjacency = adj;
    NhgnetModel<T> m(c, 4);
    std::mt19937_64 rng(1);
    m.forward(random_input<T>(c, 2, 1), Mode::train, &rng);  // non-default running stats
    m.set_trained(true);
    save_model(m, dir / "a.nhgn");
    auto loaded = load_model<T>(dir / "a.nhgn");
    save_model(loaded, dir / "b.nhgn");
    EXPECT_EQ(nhgnet::testing::read_file(dir / "a.nhgn"), nhgnet::testing::read_file(dir / "b.nhgn"));
    EXPECT_TRUE(loaded.trained());
    EXPECT_EQ(loaded.find_parameter("spatial.m_base")->trainable(), adj != AdjacencyVariant::fixed_similarity);

    auto x = random_input<T>(c, 3, 8);
    auto p1 = m.predict(x);
    auto p2 = loaded.predict(x);
    for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i].probs, p2[i].probs);
    auto ps = m.parameters();
    auto qs = loaded.parameters();
    ASSERT_EQ(ps.size(), qs.size());
    for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(ps[i]->tensor.values(), qs[i]->tensor.values());
  }
}

TEST(ModelIoErrors, HeaderAndPrecision) {
  TempDir dir;
  NhgnetModel<float> m(small_config(), 1);
  save_model(m, dir / "m.nhgn");
  auto h = peek_model_header(dir / "m.nhgn");
  EXPECT_EQ(h.precision, Precision::single);
  EXPECT_EQ(h.config.n_channels, 4u);
  // Single-precision file loads into a double model exactly.
  auto d = load_model<double>(dir / "m.nhgn");
  EXPECT_EQ(d.find_parameter("spatial.w_detail")->tensor[5],
            static_cast<double>(m.find_parameter("spatial.w_detail")->tensor[5]));
}

TEST(ModelIoErrors, BadMagicVersionAndTruncation) {
  TempDir dir;
  NhgnetModel<float> m(small_config(), 1);
  save_model(m, dir / "m.nhgn");
  const std::string bytes = nhgnet::testing::read_file(dir / "m.nhgn");

  std::string bad = bytes;
  bad[0] = 'X';
  nhgnet::testing::write_file(dir / "bad.nhgn", bad);
  EXPECT_THROW(load_model<float>(dir / "bad.nhgn"), FormatError);

  std::string ver = bytes;
  ver[4] = 9;
  nhgnet::testing::write_file(dir / "ver.nhgn", ver);
  EXPECT_THROW(load_model<float>(dir / "ver.nhgn"), FormatError);

  for (std::size_t cut : {std::size_t{6}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    nhgnet::testing::write_file(dir / "cut.nhgn", bytes.substr(0, cut));
    EXPECT_THROW(load_model<float>(dir / "cut.nhgn"), FormatError) << cut;
  }
  EXPECT_THROW(load_model<float>(dir / "missing.nhgn"), DataError);
}
