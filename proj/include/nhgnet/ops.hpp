#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "nhgnet/errors.hpp"
#include "nhgnet/fastmath.hpp"
#include "nhgnet/tensor.hpp"

// Differentiable primitives. Every op returns a new tensor; the backward
// closure reads the output grad and accumulates into the inputs that need it.

namespace nhgnet {

namespace detail {

// b broadcasts against a when b's shape equals a trailing suffix of a's shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

/// Dot product with eight fixed partial sums; the summation order depends
/// only on n, so results are reproducible while still vectorizing.
template <typename T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
         ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail;
}

template <typename T>
T sum_of(const T* __restrict a, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i];
  return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
         ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail;
}

/// Calls f with the feature count as a compile-time constant for the common
/// small case (3), or with 0 meaning "use the runtime value".
template <typename F>
decltype(auto) with_channels(std::size_t C, F&& f) {
  if (C == 3) return f(std::integral_constant<std::size_t, 3>{});
  return f(std::integral_constant<std::size_t, 0>{});
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* name, const Tensor<T>& a, F f, DF dfdx) {
  const auto& x = a.values();
  const std::size_t n = x.size();
  std::vector<T> out(n);
  const T* __restrict xp = x.data();
  T* __restrict op = out.data();
  for (std::size_t i = 0; i < n; ++i) op[i] = f(xp[i]);
  return make_result<T>(name, a.shape(), std::move(out), {a},
                        [dfdx](Node<T>& self) {
                          T* __restrict gx = parent_grad(self, 0);
                          if (!gx) return;
                          const T* __restrict xin = self.parents[0]->data.data();
                          const T* __restrict y = self.data.data();
                          const T* __restrict g = self.grad.data();
                          const std::size_t n = self.data.size();
                          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * dfdx(xin[i], y[i]);
                        });
}

enum class BinaryKind { add, sub, mul };

template <typename T>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                 BinaryKind kind) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": cannot broadcast " +
                         shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  }
  const auto& x = a.values();
  const auto& y = b.values();
  const std::size_t nb = y.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    T yv = y[i % nb];
    switch (kind) {
      case BinaryKind::add: out[i] = x[i] + yv; break;
      case BinaryKind::sub: out[i] = x[i] - yv; break;
      case BinaryKind::mul: out[i] = x[i] * yv; break;
    }
  }
  return make_result<T>(
      name, a.shape(), std::move(out), {a, b}, [kind, nb](Node<T>& self) {
        T* ga = parent_grad(self, 0);
        T* gb = parent_grad(self, 1);
        const auto& xa = self.parents[0]->data;
        const auto& xb = self.parents[1]->data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          T g = self.grad[i];
          std::size_t j = i % nb;
          switch (kind) {
            case BinaryKind::add:
              if (ga) ga[i] += g;
              if (gb) gb[j] += g;
              break;
            case BinaryKind::sub:
              if (ga) ga[i] += g;
              if (gb) gb[j] -= g;
              break;
            case BinaryKind::mul:
              if (ga) ga[i] += g * xb[j];
              if (gb) gb[j] += g * xa[i];
              break;
          }
        }
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b may be a trailing-suffix broadcast of a (bias rows etc.).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("add", a, b, detail::BinaryKind::add);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("sub", a, b, detail::BinaryKind::sub);
}

/// Elementwise product with suffix broadcasting.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("mul", a, b, detail::BinaryKind::mul);
}

/// Strict elementwise product; shapes must be identical.
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("hadamard: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  return detail::binary("hadamard", a, b, detail::BinaryKind::mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary(
      "scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      "tanh", a, [](T x) { return detail::fast_tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      "sigmoid", a, [](T x) { return detail::fast_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.01)) {
  return detail::unary(
      "leaky_relu", a,
      [slope](T x) { return std::max(x, T(0)) + slope * std::min(x, T(0)); },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

/// Natural log of max(x, floor); zero gradient in the clamped region.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a, T floor = T(1e-12)) {
  return detail::unary(
      "log_clamped", a, [floor](T x) { return detail::fast_log(std::max(x, floor)); },
      [floor](T x, T) { return x > floor ? T(1) / x : T(0); });
}

/// log10(max(x, floor)); zero gradient in the clamped region.
template <typename T>
Tensor<T> log10_clamped(const Tensor<T>& a, T floor = T(1e-12)) {
  return detail::unary(
      "log10_clamped", a,
      [floor](T x) { return detail::fast_log(std::max(x, floor)) * (T(1) / std::numbers::ln10_v<T>); },
      [floor](T x, T) {
        return x > floor ? T(1) / (x * std::numbers::ln10_v<T>) : T(0);
      });
}

/// Softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const auto& shape = a.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1, len = shape[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const auto& x = a.values();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * len * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        T e = detail::fast_exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  return detail::make_result<T>(
      "softmax", shape, std::move(out), {a},
      [outer, inner, len](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * len * inner + in;
            T dot = 0;
            for (std::size_t k = 0; k < len; ++k) {
              dot += g[base + k * inner] * y[base + k * inner];
            }
            for (std::size_t k = 0; k < len; ++k) {
              std::size_t i = base + k * inner;
              gx[i] += y[i] * (g[i] - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.values()) acc += v;
  return detail::make_result<T>("sum", Shape{}, {static_cast<T>(acc)}, {a},
                                [](detail::Node<T>& self) {
                                  T* gx = detail::parent_grad(self, 0);
                                  if (!gx) return;
                                  const std::size_t n = self.parents[0]->data.size();
                                  for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
                                });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
  }
  return detail::make_result<T>("reshape", std::move(shape), a.values(), {a},
                                [](detail::Node<T>& self) {
                                  T* gx = detail::parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    gx[i] += self.grad[i];
                                  }
                                });
}

/// Swaps the two trailing axes: [..., m, n] -> [..., n, m].
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.ndim() < 2) throw DimensionError("transpose_last2 needs ndim >= 2");
  Shape shape = a.shape();
  const std::size_t m = shape[shape.size() - 2], n = shape.back();
  std::swap(shape[shape.size() - 2], shape.back());
  const std::size_t batch = a.size() / (m * n);
  const auto& x = a.values();
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = x.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return detail::make_result<T>(
      "transpose_last2", std::move(shape), std::move(out), {a},
      [batch, m, n](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* g = self.grad.data() + b * m * n;
          T* d = gx + b * m * n;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[i * n + j] += g[j * m + i];
        }
      });
}

/// Stacks equally-shaped tensors along a new trailing axis.
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("stack_last: no inputs");
  const Shape& base = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != base) {
      throw DimensionError("stack_last: " + shape_str(p.shape()) + " vs " +
                           shape_str(base));
    }
  }
  const std::size_t k = parts.size(), n = parts[0].size();
  std::vector<T> out(n * k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto& x = parts[j].values();
    for (std::size_t i = 0; i < n; ++i) out[i * k + j] = x[i];
  }
  Shape shape = base;
  shape.push_back(k);
  return detail::make_result<T>("stack_last", std::move(shape), std::move(out),
                                parts, [k, n](detail::Node<T>& self) {
                                  for (std::size_t j = 0; j < k; ++j) {
                                    T* gx = detail::parent_grad(self, j);
                                    if (!gx) continue;
                                    for (std::size_t i = 0; i < n; ++i) {
                                      gx[i] += self.grad[i * k + j];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// C[rows x n] += A[rows x k] * B[k x n], four rows at a time so each B row
// is loaded once per block.
template <typename T>
void gemm_rows(const T* A, const T* B, T* C, std::size_t rows, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= rows; i += 4) {
    T* __restrict c0 = C + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* a0 = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const T* __restrict b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = b[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < rows; ++i) {
    T* __restrict c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = A[i * k + p];
      const T* __restrict b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += v * b[j];
    }
  }
}

// dB[k x n] += A^T G for A [rows x k], G [rows x n], four rows per pass.
template <typename T>
void gemm_at_b(const T* A, const T* G, T* dB, std::size_t rows, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= rows; i += 4) {
    const T* __restrict g0 = G + i * n;
    const T* __restrict g1 = g0 + n;
    const T* __restrict g2 = g1 + n;
    const T* __restrict g3 = g2 + n;
    const T* a0 = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      T* __restrict d = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += (v0 * g0[j] + v1 * g1[j]) + (v2 * g2[j] + v3 * g3[j]);
    }
  }
  for (; i < rows; ++i) {
    const T* __restrict g = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = A[i * k + p];
      T* __restrict d = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += v * g[j];
    }
  }
}

}  // namespace detail

/// Matrix product over the two trailing axes. Leading batch axes must agree,
/// or one operand may be a plain 2-D matrix shared across the batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw DimensionError("matmul: operands must be at least 2-D, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(sa) +
                         " x " + shape_str(sb));
  }
  Shape prefix_a(sa.begin(), sa.end() - 2), prefix_b(sb.begin(), sb.end() - 2);
  std::size_t batches = 1;
  std::size_t stride_a = m * k, stride_b = k * n;
  std::size_t rows = m;  // rows per gemm call
  Shape out_shape;
  if (prefix_b.empty()) {
    // Fold a's batch into rows.
    rows = a.size() / k;
    stride_a = 0;
    stride_b = 0;
    out_shape = prefix_a;
  } else if (prefix_a.empty()) {
    batches = shape_numel(prefix_b);
    stride_a = 0;
    out_shape = prefix_b;
  } else {
    if (prefix_a != prefix_b) {
      throw DimensionError("matmul: batch axes differ: " + shape_str(sa) +
                           " x " + shape_str(sb));
    }
    batches = shape_numel(prefix_a);
    out_shape = prefix_a;
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t stride_c = rows * n;
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<T> C(batches * rows * n, T(0));
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const T* pa = A.data() + bi * stride_a;
    const T* pb = B.data() + bi * stride_b;
    T* pc = C.data() + bi * stride_c;
    detail::gemm_rows(pa, pb, pc, rows, k, n);
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(C), {a, b},
      [=](detail::Node<T>& self) {
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const T* pa = A.data() + bi * stride_a;
          const T* pb = B.data() + bi * stride_b;
          const T* gc = self.grad.data() + bi * stride_c;
          for (std::size_t i = 0; i < rows; ++i) {
            const T* grow = gc + i * n;
            if (ga) {
              T* darow = ga + bi * stride_a + i * k;
              for (std::size_t p = 0; p < k; ++p) darow[p] += detail::dot(grow, pb + p * n, n);
            }
          }
          if (gb) detail::gemm_at_b(pa, gc, gb + bi * stride_b, rows, k, n);
        }
      });
}

/// Symmetric degree normalisation Deg^{-1/2} A Deg^{-1/2} over the trailing
/// N x N block, Deg = diag(row sums of A). Row sums must be positive.
template <typename T>
Tensor<T> degree_normalize(const Tensor<T>& a) {
  if (a.ndim() < 2 || a.shape().back() != a.shape()[a.ndim() - 2]) {
    throw DimensionError("degree_normalize: trailing block must be square, got " +
                         shape_str(a.shape()));
  }
  const std::size_t n = a.shape().back();
  const std::size_t batches = a.size() / (n * n);
  const auto& A = a.values();
  std::vector<T> inv_sqrt(batches * n);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      T deg = 0;
      for (std::size_t j = 0; j < n; ++j) deg += A[b * n * n + i * n + j];
      if (!(deg > T(0))) {
        throw NumericError("degree_normalize: non-positive degree");
      }
      inv_sqrt[b * n + i] = T(1) / std::sqrt(deg);
    }
  }
  std::vector<T> out(A.size());
  for (std::size_t b = 0; b < batches; ++b) {
    const T* d = inv_sqrt.data() + b * n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t idx = b * n * n + i * n + j;
        out[idx] = d[i] * A[idx] * d[j];
      }
  }
  return detail::make_result<T>(
      "degree_normalize", a.shape(), std::move(out), {a},
      [n, batches, inv_sqrt = std::move(inv_sqrt)](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        const auto& A = self.parents[0]->data;
        const auto& G = self.grad;
        std::vector<T> gd(n);
        for (std::size_t b = 0; b < batches; ++b) {
          const T* d = inv_sqrt.data() + b * n;
          const std::size_t off = b * n * n;
          // dL/dd_i = sum_j g_ij A_ij d_j + sum_k g_ki A_ki d_k
          std::fill(gd.begin(), gd.end(), T(0));
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              T ga = G[off + i * n + j] * A[off + i * n + j];
              gd[i] += ga * d[j];
              gd[j] += ga * d[i];
            }
          for (std::size_t i = 0; i < n; ++i) {
            // d(d_i)/dA_ij = -d_i^3 / 2 for every j in row i
            T row_term = T(-0.5) * d[i] * d[i] * d[i] * gd[i];
            for (std::size_t j = 0; j < n; ++j) {
              gx[off + i * n + j] += G[off + i * n + j] * d[i] * d[j] + row_term;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution, pooling, normalisation, regularisation

/// 'Same'-padding offset for a kernel of length k: floor((k-1)/2) zeros on
/// the left, the remainder on the right.
constexpr std::size_t same_pad_left(std::size_t k) { return (k - 1) / 2; }

namespace detail {

// 'same' cross-correlation of one row: y[t] = bias + sum_j w[j] x[t + j - pad].
template <typename T>
void conv_row_forward(const T* __restrict x, const T* __restrict w, std::size_t K,
                      std::size_t pad, std::size_t len, T bias, T* __restrict y) {
  const long L = static_cast<long>(len);
  std::fill(y, y + len, bias);
  for (std::size_t j = 0; j < K; ++j) {
    const long off = static_cast<long>(j) - static_cast<long>(pad);
    const long t0 = std::max(0L, -off), t1 = std::min(L, L - off);
    const T wj = w[j];
    const T* xs = x + off;
    for (long t = t0; t < t1; ++t) y[t] += wj * xs[t];
  }
}

// Accumulates the row's contribution to dw[K], dx[len] and db (each optional).
template <typename T>
void conv_row_backward(const T* __restrict x, const T* __restrict g, const T* __restrict w,
                       std::size_t K, std::size_t pad, std::size_t len, T* __restrict gw,
                       T* __restrict gx, T* __restrict gb) {
  const long L = static_cast<long>(len);
  if (gb) *gb += sum_of(g, len);
  for (std::size_t j = 0; j < K; ++j) {
    const long off = static_cast<long>(j) - static_cast<long>(pad);
    const long t0 = std::max(0L, -off), t1 = std::min(L, L - off);
    if (gw) gw[j] += dot(g + t0, x + t0 + off, static_cast<std::size_t>(t1 - t0));
    if (gx) {
      const T wj = w[j];
      T* dx = gx + off;
      for (long t = t0; t < t1; ++t) dx[t] += wj * g[t];
    }
  }
}

}  // namespace detail

/// Per-channel 1-D cross-correlation along time. x is [..., N, T], weights
/// [N, K], optional bias [N]. Output keeps length T; channels never mix.
template <typename T>
Tensor<T> depthwise_conv_time(const Tensor<T>& x, const Tensor<T>& weights,
                              const Tensor<T>* bias = nullptr) {
  if (x.ndim() < 2 || weights.ndim() != 2) {
    throw DimensionError("depthwise_conv_time: expected x [...,N,T] and w [N,K]");
  }
  const std::size_t N = x.shape()[x.ndim() - 2], len = x.shape().back();
  const std::size_t K = weights.dim(1);
  if (weights.dim(0) != N) {
    throw DimensionError("depthwise_conv_time: weight rows " +
                         std::to_string(weights.dim(0)) + " != channels " +
                         std::to_string(N));
  }
  if (K < 1 || K > len) {
    throw ConfigError("depthwise_conv_time: kernel length " + std::to_string(K) +
                      " outside [1, " + std::to_string(len) + "]");
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != N)) {
    throw DimensionError("depthwise_conv_time: bias must be [N]");
  }
  const std::size_t rows = x.size() / len;
  const std::size_t pad = same_pad_left(K);
  const auto& X = x.values();
  const auto& W = weights.values();
  std::vector<T> out(X.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ch = r % N;
    detail::conv_row_forward(X.data() + r * len, W.data() + ch * K, K, pad, len,
                             bias ? bias->values()[ch] : T(0), out.data() + r * len);
  }
  std::vector<Tensor<T>> inputs{x, weights};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return detail::make_result<T>(
      "depthwise_conv_time", x.shape(), std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        T* gw = detail::parent_grad(self, 1);
        T* gb = has_bias ? detail::parent_grad(self, 2) : nullptr;
        const auto& X = self.parents[0]->data;
        const auto& W = self.parents[1]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t ch = r % N;
          detail::conv_row_backward(X.data() + r * len, self.grad.data() + r * len,
                                    W.data() + ch * K, K, pad, len, gw ? gw + ch * K : nullptr,
                                    gx ? gx + r * len : nullptr, gb ? gb + ch : nullptr);
        }
      });
}

/// 1x1 convolution over the trailing feature axis: x [..., C_in],
/// weights [C_out, C_in], bias [C_out].
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& weights,
                         const Tensor<T>& bias) {
  if (x.ndim() < 1 || weights.ndim() != 2 || bias.ndim() != 1) {
    throw DimensionError("pointwise_conv: expected x [...,C_in], w [C_out,C_in], b [C_out]");
  }
  const std::size_t cin = x.shape().back(), cout = weights.dim(0);
  if (weights.dim(1) != cin || bias.dim(0) != cout) {
    throw DimensionError("pointwise_conv: channel mismatch, x " +
                         shape_str(x.shape()) + " w " + shape_str(weights.shape()) +
                         " b " + shape_str(bias.shape()));
  }
  const std::size_t sites = x.size() / cin;
  const auto& X = x.values();
  const auto& W = weights.values();
  const auto& Bv = bias.values();
  std::vector<T> out(sites * cout);
  for (std::size_t s = 0; s < sites; ++s) {
    const T* xs = X.data() + s * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = Bv[o];
      for (std::size_t c = 0; c < cin; ++c) acc += W[o * cin + c] * xs[c];
      out[s * cout + o] = acc;
    }
  }
  Shape shape = x.shape();
  shape.back() = cout;
  return detail::make_result<T>(
      "pointwise_conv", std::move(shape), std::move(out), {x, weights, bias},
      [=](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        T* gw = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        const auto& X = self.parents[0]->data;
        const auto& W = self.parents[1]->data;
        for (std::size_t s = 0; s < sites; ++s) {
          const T* xs = X.data() + s * cin;
          const T* g = self.grad.data() + s * cout;
          for (std::size_t o = 0; o < cout; ++o) {
            if (gb) gb[o] += g[o];
            for (std::size_t c = 0; c < cin; ++c) {
              if (gw) gw[o * cin + c] += g[o] * xs[c];
              if (gx) gx[s * cin + c] += g[o] * W[o * cin + c];
            }
          }
        }
      });
}

/// Sliding mean along time, stride 1, no padding. x is [..., T, C];
/// output [..., T - kernel + 1, C].
template <typename T>
Tensor<T> avgpool_time(const Tensor<T>& x, std::size_t kernel) {
  if (x.ndim() < 2) throw DimensionError("avgpool_time: expected [..., T, C]");
  const std::size_t len = x.shape()[x.ndim() - 2], C = x.shape().back();
  if (kernel < 1 || kernel > len) {
    throw ConfigError("avgpool_time: kernel " + std::to_string(kernel) +
                      " outside [1, " + std::to_string(len) + "]");
  }
  const std::size_t out_len = len - kernel + 1;
  const std::size_t blocks = x.size() / (len * C);
  const auto& X = x.values();
  std::vector<T> out(blocks * out_len * C);
  std::vector<double> prefix(len + 1);
  const double inv_k = 1.0 / static_cast<double>(kernel);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* xs = X.data() + b * len * C + c;
      prefix[0] = 0;
      for (std::size_t t = 0; t < len; ++t) prefix[t + 1] = prefix[t] + xs[t * C];
      T* ys = out.data() + b * out_len * C + c;
      if (kernel == 1) {
        for (std::size_t t = 0; t < out_len; ++t) ys[t * C] = xs[t * C];
        continue;
      }
      for (std::size_t t = 0; t < out_len; ++t) {
        ys[t * C] = static_cast<T>((prefix[t + kernel] - prefix[t]) * inv_k);
      }
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_len;
  return detail::make_result<T>(
      "avgpool_time", std::move(shape), std::move(out), {x},
      [=](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        std::vector<double> prefix(out_len + 1);
        for (std::size_t b = 0; b < blocks; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* g = self.grad.data() + b * out_len * C + c;
            prefix[0] = 0;
            for (std::size_t t = 0; t < out_len; ++t) prefix[t + 1] = prefix[t] + g[t * C];
            T* dx = gx + b * len * C + c;
            if (kernel == 1) {
              for (std::size_t t = 0; t < len; ++t) dx[t * C] += g[t * C];
              continue;
            }
            // input t receives outputs s with s <= t <= s + kernel - 1
            for (std::size_t t = 0; t < len; ++t) {
              std::size_t lo = t + 1 >= kernel ? t + 1 - kernel : 0;
              std::size_t hi = std::min(t, out_len - 1);
              if (lo > hi) continue;
              dx[t * C] += static_cast<T>((prefix[hi + 1] - prefix[lo]) * inv_k);
            }
          }
        }
      });
}

/// Batch normalisation over the trailing feature axis: statistics are taken
/// over every other axis. In training mode running stats are updated
/// (momentum-weighted, unbiased variance); in eval mode they are used.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, std::span<T> running_mean,
                    std::span<T> running_var, bool train, T eps = T(1e-5),
                    T momentum = T(0.1)) {
  if (x.ndim() < 1) throw DimensionError("batchnorm: scalar input");
  const std::size_t C = x.shape().back();
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
      running_var.size() != C) {
    throw DimensionError("batchnorm: feature axis " + std::to_string(C) +
                         " does not match gamma/beta/running stats");
  }
  if (x.size() == 0) throw DimensionError("batchnorm: zero batch size");
  const std::size_t count = x.size() / C;
  const T* X = x.values().data();
  std::vector<T> mean_c(C), inv_std(C);
  if (train) {
    std::vector<double> s(C, 0.0), s2(C, 0.0);
    detail::with_channels(C, [&](auto cc) {
      const std::size_t CC = cc() ? cc() : C;
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t c = 0; c < CC; ++c) s[c] += X[i * CC + c];
      for (std::size_t c = 0; c < CC; ++c) s[c] /= static_cast<double>(count);
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t c = 0; c < CC; ++c) {
          const double d = X[i * CC + c] - s[c];
          s2[c] += d * d;
        }
    });
    for (std::size_t c = 0; c < C; ++c) {
      const double var = s2[c] / static_cast<double>(count);
      const double unbiased = count > 1 ? s2[c] / static_cast<double>(count - 1) : var;
      mean_c[c] = static_cast<T>(s[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(s[c]);
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  const T* G = gamma.values().data();
  const T* Bt = beta.values().data();
  std::vector<T> out(x.size());
  T* __restrict y = out.data();
  detail::with_channels(C, [&](auto cc) {
    const std::size_t CC = cc() ? cc() : C;
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t c = 0; c < CC; ++c) {
        const std::size_t idx = i * CC + c;
        y[idx] = G[c] * ((X[idx] - mean_c[c]) * inv_std[c]) + Bt[c];
      }
  });
  return detail::make_result<T>(
      "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
      [=, mean_c = std::move(mean_c), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        T* gg = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        const T* X = self.parents[0]->data.data();
        const T* G = self.parents[1]->data.data();
        const T* dy = self.grad.data();
        // xhat is recomputed with the forward formula rather than stored.
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        detail::with_channels(C, [&](auto cc) {
          const std::size_t CC = cc() ? cc() : C;
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t c = 0; c < CC; ++c) {
              const std::size_t idx = i * CC + c;
              const T xhat = (X[idx] - mean_c[c]) * inv_std[c];
              sum_dy[c] += dy[idx];
              sum_dy_xhat[c] += dy[idx] * xhat;
            }
        });
        for (std::size_t c = 0; c < C; ++c) {
          if (gg) gg[c] += static_cast<T>(sum_dy_xhat[c]);
          if (gb) gb[c] += static_cast<T>(sum_dy[c]);
        }
        if (!gx) return;
        const double n = static_cast<double>(count);
        if (!train) {
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t c = 0; c < C; ++c) gx[i * C + c] += dy[i * C + c] * G[c] * inv_std[c];
          return;
        }
        std::vector<double> k1(C), k2(C), k3(C);
        for (std::size_t c = 0; c < C; ++c) {
          const double scale = G[c] * inv_std[c] / n;
          k1[c] = scale * n;
          k2[c] = scale * sum_dy[c];
          k3[c] = scale * sum_dy_xhat[c];
        }
        detail::with_channels(C, [&](auto cc) {
          const std::size_t CC = cc() ? cc() : C;
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t c = 0; c < CC; ++c) {
              const std::size_t idx = i * CC + c;
              const T xhat = (X[idx] - mean_c[c]) * inv_std[c];
              gx[idx] += static_cast<T>(k1[c] * dy[idx] - k2[c] - k3[c] * xhat);
            }
        });
      });
}

/// Inverted dropout. Identity in eval mode or at rate 0.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = unif(rng) < rate ? T(0) : keep_scale;
  std::vector<T> out(x.size());
  const auto& X = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * mask[i];
  return detail::make_result<T>("dropout", x.shape(), std::move(out), {x},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  T* gx = detail::parent_grad(self, 0);
                                  if (!gx) return;
                                  for (std::size_t i = 0; i < mask.size(); ++i) {
                                    gx[i] += self.grad[i] * mask[i];
                                  }
                                });
}

}  // namespace nhgnet
