#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "nhgnet/fastmath.hpp"
#include "nhgnet/fused.hpp"

using namespace nhgnet;
using nhgnet::testing::grad_check;
using nhgnet::testing::random_tensor;
using nhgnet::testing::TensorD;
using nhgnet::testing::weighted_sum;

namespace {

template <typename T>
Tensor<T> rand_t(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
std::vector<T> grads_of(const Tensor<T>& t) {
  return {t.grad().begin(), t.grad().end()};
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol * std::max(1.0, std::abs(b[i]))) << i;
}

}  // namespace

TEST(FastMath, MatchesLibmWithinFewUlp) {
  auto ulps = [](float got, double want) {
    const float w = static_cast<float>(want);
    return std::abs(static_cast<double>(got) - want) / (std::nextafter(w, INFINITY) - w);
  };
  double worst_exp = 0, worst_tanh = 0, worst_log = 0;
  for (float x = -80.0f; x < 80.0f; x += 0.0173f) {
    worst_exp = std::max(worst_exp, ulps(detail::exp_f32(x), std::exp(static_cast<double>(x))));
  }
  for (float x = -10.0f; x < 10.0f; x += 0.00071f) {
    worst_tanh = std::max(worst_tanh, ulps(detail::tanh_f32(x), std::tanh(static_cast<double>(x))));
  }
  for (float x = 1e-12f; x < 1e20f; x *= 1.0071f) {
    const double want = std::log(static_cast<double>(x));
    worst_log = std::max(worst_log, std::abs(detail::log_f32(x) - want) / std::max(std::abs(want), 1e-3));
  }
  EXPECT_LT(worst_exp, 2.0);
  EXPECT_LT(worst_tanh, 3.0);
  EXPECT_LT(worst_log, 2e-7);
  EXPECT_EQ(detail::tanh_f32(0.0f), 0.0f);
  EXPECT_NEAR(detail::fast_sigmoid(-30.0f), 9.357623e-14f, 1e-18f);
}

template <typename T>
class FusedTyped : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(FusedTyped, Scalars);

TYPED_TEST(FusedTyped, MultiscaleConvEqualsStackedBranches) {
  using T = TypeParam;
  std::mt19937_64 rng(1);
  auto x = rand_t<T>({2, 3, 20}, rng);
  std::vector<Tensor<T>> w{rand_t<T>({3, 8}, rng), rand_t<T>({3, 4}, rng), rand_t<T>({3, 2}, rng)};
  std::vector<Tensor<T>> b{rand_t<T>({3}, rng), rand_t<T>({3}, rng), rand_t<T>({3}, rng)};
  auto fused = multiscale_depthwise_conv(x, w, b);
  std::vector<Tensor<T>> parts;
  for (int i = 0; i < 3; ++i) parts.push_back(depthwise_conv_time(x, w[i], &b[i]));
  auto ref = stack_last(parts);
  ASSERT_EQ(fused.shape(), ref.shape());
  EXPECT_EQ(fused.values(), ref.values());
}

TYPED_TEST(FusedTyped, GateEqualsPrimitiveChain) {
  using T = TypeParam;
  std::mt19937_64 rng(2);
  auto D = rand_t<T>({2, 3, 7, 3}, rng, -2, 2);
  auto W = rand_t<T>({3, 3}, rng);
  auto b = rand_t<T>({3}, rng);
  for (auto act : {GateActivation::tanh, GateActivation::sigmoid, GateActivation::softmax}) {
    Tensor<T> gate;
    auto fused = attention_gate(D, W, b, act, &gate);
    auto pre = pointwise_conv(D, W, b);
    Tensor<T> wa = act == GateActivation::tanh      ? tanh(pre)
                   : act == GateActivation::sigmoid ? sigmoid(pre)
                                                    : softmax(pre, 3);
    EXPECT_EQ(gate.values(), wa.values());
    EXPECT_EQ(fused.values(), hadamard(D, wa).values());
    EXPECT_FALSE(gate.requires_grad());
  }
}

TYPED_TEST(FusedTyped, LogEnergyEqualsPrimitiveChain) {
  using T = TypeParam;
  std::mt19937_64 rng(3);
  auto x = rand_t<T>({2, 2, 16, 3}, rng, -3, 3);
  for (std::size_t k : {1u, 4u, 16u}) {
    auto fused = log_energy(x, T(0.01), k);
    auto ref = log10_clamped(avgpool_time(square(leaky_relu(x, T(0.01))), k));
    EXPECT_EQ(fused.values(), ref.values()) << k;
  }
  EXPECT_THROW(log_energy(x, T(0.01), 17), ConfigError);
}

TEST(Fused, GradientsMatchPrimitiveChain) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 3, 24}, rng);
  std::vector<TensorD> w{random_tensor({3, 8}, rng), random_tensor({3, 4}, rng), random_tensor({3, 2}, rng)};
  std::vector<TensorD> b{random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
  auto W = random_tensor({3, 3}, rng);
  auto bw = random_tensor({3}, rng);
  std::vector<TensorD> all{x, W, bw};
  all.insert(all.end(), w.begin(), w.end());
  all.insert(all.end(), b.begin(), b.end());

  for (auto act : {GateActivation::tanh, GateActivation::sigmoid, GateActivation::softmax}) {
    for (auto& t : all) t.zero_grad();
    backward(weighted_sum(log_energy(attention_gate(multiscale_depthwise_conv(x, w, b), W, bw, act), 0.01, 6)));
    std::vector<std::vector<double>> fused;
    for (auto& t : all) fused.push_back(grads_of(t));

    for (auto& t : all) t.zero_grad();
    std::vector<TensorD> parts;
    for (int i = 0; i < 3; ++i) parts.push_back(depthwise_conv_time(x, w[i], &b[i]));
    auto D = stack_last(parts);
    auto pre = pointwise_conv(D, W, bw);
    auto wa = act == GateActivation::tanh ? tanh(pre) : act == GateActivation::sigmoid ? sigmoid(pre) : softmax(pre, 3);
    backward(weighted_sum(log10_clamped(avgpool_time(square(leaky_relu(hadamard(D, wa), 0.01)), 6))));
    for (std::size_t i = 0; i < all.size(); ++i) expect_close(fused[i], grads_of(all[i]), 1e-12);
  }
}

TEST(Fused, FiniteDifferenceChecks) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 2, 12}, rng);
  std::vector<TensorD> w{random_tensor({2, 4}, rng), random_tensor({2, 3}, rng)};
  std::vector<TensorD> b{random_tensor({2}, rng), random_tensor({2}, rng)};
  auto conv = grad_check([&] { return weighted_sum(multiscale_depthwise_conv(x, w, b)); },
                         {x, w[0], w[1], b[0], b[1]});
  EXPECT_LT(conv.max_rel_error, 1e-5);

  auto D = random_tensor({2, 5, 3}, rng, -2, 2);
  auto W = random_tensor({3, 3}, rng);
  auto bw = random_tensor({3}, rng);
  for (auto act : {GateActivation::tanh, GateActivation::sigmoid, GateActivation::softmax}) {
    auto gate = grad_check([&] { return weighted_sum(attention_gate(D, W, bw, act)); }, {D, W, bw});
    EXPECT_LT(gate.max_rel_error, 1e-5);
  }

  auto e = random_tensor({2, 10, 3}, rng, -2, 2);
  auto le = grad_check([&] { return weighted_sum(log_energy(e, 0.01, 4)); }, {e});
  EXPECT_LT(le.max_rel_error, 1e-5);
}

TEST(Fused, ShapeErrors) {
  Tensor<float> x({1, 3, 10});
  EXPECT_THROW(multiscale_depthwise_conv(x, {Tensor<float>({2, 3})}, {Tensor<float>({3})}), DimensionError);
  EXPECT_THROW(multiscale_depthwise_conv(x, {Tensor<float>({3, 11})}, {Tensor<float>({3})}), ConfigError);
  EXPECT_THROW(attention_gate(Tensor<float>({2, 3}), Tensor<float>({2, 2}), Tensor<float>({2}),
                              GateActivation::tanh),
               DimensionError);
}

TEST(Fused, GatesStayInsideOpenIntervalWhenSaturated) {
  for (float x : {-1e4f, -90.0f, -20.0f, 20.0f, 90.0f, 1e4f}) {
    const float t = detail::fast_tanh(x), s = detail::fast_sigmoid(x);
    EXPECT_GT(t, -1.0f);
    EXPECT_LT(t, 1.0f);
    EXPECT_GT(s, 0.0f);
    EXPECT_LT(s, 1.0f);
  }
  for (double x : {-1e4, -800.0, 40.0, 1e4}) {
    EXPECT_GT(detail::fast_tanh(x), -1.0);
    EXPECT_LT(detail::fast_tanh(x), 1.0);
    EXPECT_GT(detail::fast_sigmoid(x), 0.0);
    EXPECT_LT(detail::fast_sigmoid(x), 1.0);
  }
  EXPECT_EQ(detail::fast_tanh(3.0), std::tanh(3.0));
  EXPECT_EQ(detail::fast_sigmoid(0.0f), 0.5f);
}
