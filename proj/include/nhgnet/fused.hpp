#pragma once

#include <numbers>
#include <vector>

#include "nhgnet/fastmath.hpp"
#include "nhgnet/ops.hpp"

// Single-pass versions of the temporal block. Each one computes exactly the
// same forward values as the chain of primitives it replaces (see
// test_fused.cpp), but touches every element once instead of once per op.

namespace nhgnet {

/// stack_last of depthwise_conv_time over several kernels: x [..., N, T],
/// weights[i] [N, K_i], biases[i] [N] -> [..., N, T, S].
template <typename T>
Tensor<T> multiscale_depthwise_conv(const Tensor<T>& x, const std::vector<Tensor<T>>& weights,
                                    const std::vector<Tensor<T>>& biases) {
  const std::size_t S = weights.size();
  if (S == 0 || biases.size() != S) {
    throw DimensionError("multiscale_depthwise_conv: need matching weight and bias lists");
  }
  if (x.ndim() < 2) throw DimensionError("multiscale_depthwise_conv: expected x [..., N, T]");
  const std::size_t N = x.shape()[x.ndim() - 2], len = x.shape().back();
  std::vector<std::size_t> K(S), pad(S);
  for (std::size_t i = 0; i < S; ++i) {
    if (weights[i].ndim() != 2 || weights[i].dim(0) != N) {
      throw DimensionError("multiscale_depthwise_conv: weights must be [N, K], got " +
                           shape_str(weights[i].shape()));
    }
    if (biases[i].ndim() != 1 || biases[i].dim(0) != N) {
      throw DimensionError("multiscale_depthwise_conv: bias must be [N]");
    }
    K[i] = weights[i].dim(1);
    if (K[i] < 1 || K[i] > len) {
      throw ConfigError("multiscale_depthwise_conv: kernel length " + std::to_string(K[i]) +
                        " outside [1, " + std::to_string(len) + "]");
    }
    pad[i] = same_pad_left(K[i]);
  }
  const std::size_t rows = x.size() / len;
  const T* X = x.values().data();
  std::vector<T> out(x.size() * S);
  std::vector<T> row(len);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ch = r % N;
    for (std::size_t i = 0; i < S; ++i) {
      detail::conv_row_forward(X + r * len, weights[i].values().data() + ch * K[i], K[i], pad[i], len,
                               biases[i].values()[ch], row.data());
      T* o = out.data() + r * len * S + i;
      for (std::size_t t = 0; t < len; ++t) o[t * S] = row[t];
    }
  }
  Shape shape = x.shape();
  shape.push_back(S);
  std::vector<Tensor<T>> inputs{x};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  inputs.insert(inputs.end(), biases.begin(), biases.end());
  return detail::make_result<T>(
      "multiscale_depthwise_conv", std::move(shape), std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        const T* X = self.parents[0]->data.data();
        std::vector<T> g(len);
        for (std::size_t i = 0; i < S; ++i) {
          T* gw = detail::parent_grad(self, 1 + i);
          T* gb = detail::parent_grad(self, 1 + S + i);
          const T* W = self.parents[1 + i]->data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t ch = r % N;
            const T* gs = self.grad.data() + r * len * S + i;
            for (std::size_t t = 0; t < len; ++t) g[t] = gs[t * S];
            detail::conv_row_backward(X + r * len, g.data(), W + ch * K[i], K[i], pad[i], len,
                                      gw ? gw + ch * K[i] : nullptr, gx ? gx + r * len : nullptr,
                                      gb ? gb + ch : nullptr);
          }
        }
      });
}

enum class GateActivation { tanh, sigmoid, softmax };

/// D * act(pointwise_conv(D, W, b)) with act over the trailing axis. When
/// `gate_out` is given it receives a detached copy of the gate values.
template <typename T>
Tensor<T> attention_gate(const Tensor<T>& D, const Tensor<T>& W, const Tensor<T>& b, GateActivation act,
                         Tensor<T>* gate_out = nullptr) {
  if (D.ndim() < 1) throw DimensionError("attention_gate: scalar input");
  const std::size_t C = D.shape().back();
  if (W.shape() != Shape{C, C} || b.shape() != Shape{C}) {
    throw DimensionError("attention_gate: expected W [C,C] and b [C] for C = " + std::to_string(C));
  }
  const std::size_t sites = D.size() / C;
  const T* X = D.values().data();
  const T* Wv = W.values().data();
  const T* Bv = b.values().data();
  std::vector<T> gate(D.size());
  T* __restrict a = gate.data();
  detail::with_channels(C, [&](auto cc) {
    const std::size_t CC = cc() ? cc() : C;
    for (std::size_t s = 0; s < sites; ++s) {
      const T* xs = X + s * CC;
      for (std::size_t o = 0; o < CC; ++o) {
        T acc = Bv[o];
        for (std::size_t c = 0; c < CC; ++c) acc += Wv[o * CC + c] * xs[c];
        a[s * CC + o] = acc;
      }
    }
  });
  const std::size_t n = gate.size();
  switch (act) {
    case GateActivation::tanh:
      for (std::size_t i = 0; i < n; ++i) a[i] = detail::fast_tanh(a[i]);
      break;
    case GateActivation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) a[i] = detail::fast_sigmoid(a[i]);
      break;
    case GateActivation::softmax:
      for (std::size_t s = 0; s < sites; ++s) {
        T* as = a + s * C;
        T mx = as[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, as[c]);
        T total = 0;
        for (std::size_t c = 0; c < C; ++c) {
          as[c] = detail::fast_exp(as[c] - mx);
          total += as[c];
        }
        for (std::size_t c = 0; c < C; ++c) as[c] /= total;
      }
      break;
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = X[i] * a[i];
  if (gate_out) *gate_out = Tensor<T>(D.shape(), gate);
  return detail::make_result<T>(
      "attention_gate", D.shape(), std::move(out), {D, W, b},
      [=, gate = std::move(gate)](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        T* gW = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        const T* X = self.parents[0]->data.data();
        const T* Wv = self.parents[1]->data.data();
        const T* gh = self.grad.data();
        std::vector<T> gw_acc(C * C, T(0)), gb_acc(C, T(0));
        detail::with_channels(C, [&](auto cc) {
          const std::size_t CC = cc() ? cc() : C;
          std::vector<T> ga_buf(CC), gl_buf(CC);
          T* ga = ga_buf.data();
          T* gl = gl_buf.data();
          for (std::size_t s = 0; s < sites; ++s) {
            const T* xs = X + s * CC;
            const T* ws = gate.data() + s * CC;
            const T* gs = gh + s * CC;
            // d out / d gate, then back through the activation.
            for (std::size_t c = 0; c < CC; ++c) gl[c] = gs[c] * xs[c];
            switch (act) {
              case GateActivation::tanh:
                for (std::size_t c = 0; c < CC; ++c) ga[c] = gl[c] * (T(1) - ws[c] * ws[c]);
                break;
              case GateActivation::sigmoid:
                for (std::size_t c = 0; c < CC; ++c) ga[c] = gl[c] * (ws[c] * (T(1) - ws[c]));
                break;
              case GateActivation::softmax: {
                T dotp = 0;
                for (std::size_t c = 0; c < CC; ++c) dotp += gl[c] * ws[c];
                for (std::size_t c = 0; c < CC; ++c) ga[c] = ws[c] * (gl[c] - dotp);
                break;
              }
            }
            for (std::size_t o = 0; o < CC; ++o) {
              gb_acc[o] += ga[o];
              for (std::size_t c = 0; c < CC; ++c) gw_acc[o * CC + c] += ga[o] * xs[c];
            }
            if (gx) {
              for (std::size_t c = 0; c < CC; ++c) {
                T v = gs[c] * ws[c];
                for (std::size_t o = 0; o < CC; ++o) v += ga[o] * Wv[o * CC + c];
                gx[s * CC + c] += v;
              }
            }
          }
        });
        if (gW)
          for (std::size_t k = 0; k < C * C; ++k) gW[k] += gw_acc[k];
        if (gb)
          for (std::size_t o = 0; o < C; ++o) gb[o] += gb_acc[o];
      });
}

/// log10_clamped(avgpool_time(square(leaky_relu(x, slope)), kernel), floor)
/// for x [..., T, C]; output [..., T - kernel + 1, C].
template <typename T>
Tensor<T> log_energy(const Tensor<T>& x, T slope, std::size_t kernel, T floor = T(1e-12)) {
  if (x.ndim() < 2) throw DimensionError("log_energy: expected [..., T, C]");
  const std::size_t len = x.shape()[x.ndim() - 2], C = x.shape().back();
  if (kernel < 1 || kernel > len) {
    throw ConfigError("log_energy: kernel " + std::to_string(kernel) + " outside [1, " +
                      std::to_string(len) + "]");
  }
  const std::size_t out_len = len - kernel + 1;
  const std::size_t blocks = x.size() / (len * C);
  const double inv_k = 1.0 / static_cast<double>(kernel);
  constexpr T inv_ln10 = T(1) / std::numbers::ln10_v<T>;
  const T* X = x.values().data();
  std::vector<T> pooled(blocks * out_len * C), out(pooled.size());
  std::vector<double> prefix((len + 1) * C);
  for (std::size_t b = 0; b < blocks; ++b) {
    const T* xb = X + b * len * C;
    T* pb = pooled.data() + b * out_len * C;
    for (std::size_t c = 0; c < C; ++c) prefix[c] = 0;
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        const T v = xb[t * C + c];
        const T l = std::max(v, T(0)) + slope * std::min(v, T(0));
        prefix[(t + 1) * C + c] = prefix[t * C + c] + static_cast<T>(l * l);
      }
    if (kernel == 1) {
      for (std::size_t i = 0; i < out_len * C; ++i) {
        const T v = xb[i];
        const T l = std::max(v, T(0)) + slope * std::min(v, T(0));
        pb[i] = l * l;
      }
    } else {
      for (std::size_t i = 0; i < out_len * C; ++i) {
        pb[i] = static_cast<T>((prefix[i + kernel * C] - prefix[i]) * inv_k);
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::fast_log(std::max(pooled[i], floor)) * inv_ln10;
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_len;
  return detail::make_result<T>(
      "log_energy", std::move(shape), std::move(out), {x},
      [=, pooled = std::move(pooled)](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        const T* X = self.parents[0]->data.data();
        std::vector<T> gp(out_len * C);
        std::vector<double> prefix((out_len + 1) * C);
        for (std::size_t b = 0; b < blocks; ++b) {
          const T* gy = self.grad.data() + b * out_len * C;
          const T* pb = pooled.data() + b * out_len * C;
          for (std::size_t i = 0; i < out_len * C; ++i) {
            gp[i] = gy[i] * (pb[i] > floor ? T(1) / (pb[i] * std::numbers::ln10_v<T>) : T(0));
          }
          // Gradient of the sliding mean: input t collects outputs lo..hi.
          std::vector<T> ge(len * C);
          if (kernel == 1) {
            std::copy(gp.begin(), gp.end(), ge.begin());
          } else {
            for (std::size_t c = 0; c < C; ++c) prefix[c] = 0;
            for (std::size_t i = 0; i < out_len * C; ++i) prefix[i + C] = prefix[i] + gp[i];
            for (std::size_t t = 0; t < len; ++t) {
              const std::size_t lo = t + 1 >= kernel ? t + 1 - kernel : 0;
              const std::size_t hi = std::min(t, out_len - 1);
              if (lo > hi) continue;
              for (std::size_t c = 0; c < C; ++c) {
                ge[t * C + c] = static_cast<T>((prefix[(hi + 1) * C + c] - prefix[lo * C + c]) * inv_k);
              }
            }
          }
          const T* xb = X + b * len * C;
          T* gb = gx + b * len * C;
          for (std::size_t i = 0; i < len * C; ++i) {
            const T v = xb[i];
            const T l = std::max(v, T(0)) + slope * std::min(v, T(0));
            gb[i] += (ge[i] * (T(2) * l)) * (v > T(0) ? T(1) : slope);
          }
        }
      });
}

}  // namespace nhgnet
