// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>. Layout is N x C x H x W
// row-major for image tensors and N x K for feature matrices.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcfusion/parallel.hpp"
#include "rcfusion/tensor.hpp"

namespace rcf {

namespace kernel {

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M x N] += A^T * B where A is [K x M] and B is [K x N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[k * M + i];
      if (a == T(0)) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* A) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = A[i * cols + j];
  return out;
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

// col[(c, ky, kx) x (oy, ox)]
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace kernel

/// Output side length of a convolution: floor((size - kernel + 2 pad) / stride) + 1.
inline std::size_t conv_output_size(std::size_t size, std::size_t kernel, std::size_t padding,
                                    std::size_t stride) {
  if (stride == 0) throw ValueError("stride must be positive");
  if (kernel == 0) throw ValueError("kernel size must be positive");
  if (kernel > size + 2 * padding) {
    throw ShapeError("kernel size " + std::to_string(kernel) + " exceeds padded input size " +
                     std::to_string(size + 2 * padding));
  }
  return (size + 2 * padding - kernel) / stride + 1;
}

/// Output side length of a pooling window: floor((size - extent) / stride) + 1.
inline std::size_t pool_output_size(std::size_t size, std::size_t extent, std::size_t stride) {
  if (stride == 0 || extent == 0) throw ValueError("pool extent and stride must be positive");
  if (extent > size) {
    throw ShapeError("pool extent " + std::to_string(extent) + " exceeds input size " +
                     std::to_string(size));
  }
  return (size - extent) / stride + 1;
}

namespace detail {

template <Scalar T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <Scalar T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <Scalar T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(M * N, T(0));
  kernel::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  return make_op<T>(OpKind::Matmul, {M, N}, std::move(out), {a, b}, [M, N, K](Node<T>& self) {
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    if (detail::wants(self, 0)) {
      const auto bt = kernel::transposed(K, N, B.data());
      kernel::gemm_nn(M, K, N, self.grad.data(), bt.data(), self.inputs[0]->grad_buffer().data());
    }
    if (detail::wants(self, 1)) {
      kernel::gemm_tn(K, N, M, A.data(), self.grad.data(), self.inputs[1]->grad_buffer().data());
    }
  });
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  return make_op<T>(OpKind::Transpose, {C, R}, kernel::transposed(R, C, a.data().data()), {a},
                    [R, C](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t i = 0; i < R; ++i)
                        for (std::size_t j = 0; j < C; ++j) g[i * C + j] += self.grad[j * R + i];
                    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op<T>(OpKind::Add, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      auto& g = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op<T>(OpKind::Sub, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op<T>(OpKind::Mul, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    if (detail::wants(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
    }
  });
}

/// scale * a + shift
template <Scalar T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift = T(0)) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * a[i] + shift;
  return make_op<T>(OpKind::Affine, a.shape(), std::move(out), {a}, [scale](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

/// Adds a vector along the last axis (bias broadcast over rows).
template <Scalar T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require_rank(v, 1, "add_row_vector");
  if (x.rank() == 0 || x.shape().back() != v.dim(0)) {
    throw ShapeError("add_row_vector: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  }
  const std::size_t K = v.dim(0);
  const std::size_t rows = K ? x.size() / K : 0;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < K; ++k) out[r * K + k] = x[r * K + k] + v[k];
  return make_op<T>(OpKind::AddRowVector, x.shape(), std::move(out), {x, v},
                    [rows, K](Node<T>& self) {
                      if (detail::wants(self, 0)) {
                        auto& g = self.inputs[0]->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                      }
                      if (detail::wants(self, 1)) {
                        auto& g = self.inputs[1]->grad_buffer();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t k = 0; k < K; ++k) g[k] += self.grad[r * K + k];
                      }
                    });
}

template <Scalar T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <Scalar T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <Scalar T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <Scalar T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return affine(a, s); }

// ---------------------------------------------------------------------------
// Reductions

template <Scalar T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_op<T>(OpKind::Sum, {}, {total}, {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T s = self.grad[0];
    for (auto& v : g) v += s;
  });
}

template <Scalar T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return affine(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Sum of squared entries (squared Frobenius norm for matrices).
template <Scalar T>
Tensor<T> sum_squares(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v * v;
  return make_op<T>(OpKind::SumSquares, {}, {total}, {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& x = self.inputs[0]->data;
    const T s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * x[i] * s;
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Relu, Sigmoid, Tanh };

template <Scalar T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  if (branch_tracing()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (a[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == out.size()) record_branch(word);
    }
  }
  return make_op<T>(OpKind::Relu, a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) g[i] += self.grad[i];
  });
}

template <Scalar T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    // split on sign so exp never overflows
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  return make_op<T>(OpKind::Sigmoid, a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <Scalar T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  return make_op<T>(OpKind::Tanh, a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

template <Scalar T>
Tensor<T> activation(const Tensor<T>& a, Activation kind) {
  switch (kind) {
    case Activation::Relu: return relu(a);
    case Activation::Sigmoid: return sigmoid(a);
    case Activation::Tanh: return tanh(a);
  }
  throw ValueError("unknown activation");
}

// ---------------------------------------------------------------------------
// Softmax family (row-wise over N x K)

namespace detail {

template <Scalar T>
std::vector<T> log_softmax_rows(std::span<const T> x, std::size_t N, std::size_t K) {
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x.data() + n * K;
    const T m = *std::max_element(row, row + K);
    T s = T(0);
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
    const T lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = row[k] - lse;
  }
  return out;
}

template <Scalar T>
void check_labels(std::span<const std::size_t> labels, std::size_t N, std::size_t K) {
  if (labels.size() != N) {
    throw ShapeError("expected " + std::to_string(N) + " labels, got " +
                     std::to_string(labels.size()));
  }
  for (auto l : labels) {
    if (l >= K) {
      throw ValueError("label " + std::to_string(l) + " out of range for " + std::to_string(K) +
                       " classes");
    }
  }
}

}  // namespace detail

template <Scalar T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K == 0) throw ShapeError("softmax over zero classes");
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data().data() + n * K;
    const T m = *std::max_element(row, row + K);
    T s = T(0);
    for (std::size_t k = 0; k < K; ++k) s += (out[n * K + k] = std::exp(row[k] - m));
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= s;
  }
  return make_op<T>(OpKind::Softmax, logits.shape(), std::move(out), {logits},
                    [N, K](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t n = 0; n < N; ++n) {
                        const T* y = self.data.data() + n * K;
                        const T* dy = self.grad.data() + n * K;
                        T dot = T(0);
                        for (std::size_t k = 0; k < K; ++k) dot += y[k] * dy[k];
                        for (std::size_t k = 0; k < K; ++k) g[n * K + k] += y[k] * (dy[k] - dot);
                      }
                    });
}

template <Scalar T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "log_softmax");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K == 0) throw ShapeError("log_softmax over zero classes");
  return make_op<T>(OpKind::LogSoftmax, logits.shape(),
                    detail::log_softmax_rows<T>(logits.data(), N, K), {logits},
                    [N, K](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t n = 0; n < N; ++n) {
                        const T* ly = self.data.data() + n * K;
                        const T* dy = self.grad.data() + n * K;
                        T s = T(0);
                        for (std::size_t k = 0; k < K; ++k) s += dy[k];
                        for (std::size_t k = 0; k < K; ++k)
                          g[n * K + k] += dy[k] - std::exp(ly[k]) * s;
                      }
                    });
}

/// Mean over the batch of -log softmax(logits)[label], fused for stability.
template <Scalar T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  detail::check_labels<T>(labels, N, K);
  if (N == 0) throw ShapeError("cross_entropy on empty batch");
  auto logp = detail::log_softmax_rows<T>(logits.data(), N, K);
  T total = T(0);
  for (std::size_t n = 0; n < N; ++n) total -= logp[n * K + labels[n]];
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return make_op<T>(
      OpKind::CrossEntropy, {}, {total / static_cast<T>(N)}, {logits},
      [N, K, logp = std::move(logp), saved = std::move(saved)](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T s = self.grad[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const T p = std::exp(logp[n * K + k]);
            g[n * K + k] += s * (p - (k == saved[n] ? T(1) : T(0)));
          }
        }
      });
}

/// Mean over the batch of -log p[label] for probability rows.
template <Scalar T>
Tensor<T> nll_from_probabilities(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  detail::require_rank(probs, 2, "nll_from_probabilities");
  const std::size_t N = probs.dim(0), K = probs.dim(1);
  detail::check_labels<T>(labels, N, K);
  if (N == 0) throw ShapeError("nll on empty batch");
  T total = T(0);
  for (std::size_t n = 0; n < N; ++n) total -= std::log(probs[n * K + labels[n]]);
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return make_op<T>(OpKind::NllFromProbs, {}, {total / static_cast<T>(N)}, {probs},
                    [N, K, saved = std::move(saved)](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      const auto& p = self.inputs[0]->data;
                      const T s = self.grad[0] / static_cast<T>(N);
                      for (std::size_t n = 0; n < N; ++n)
                        g[n * K + saved[n]] -= s / p[n * K + saved[n]];
                    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <Scalar T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return make_op<T>(OpKind::Reshape, std::move(shape), a.values(), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenation along `axis`. Inputs with zero extent on the axis are allowed.
template <Scalar T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of empty list");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s) +
                       " on axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * w, w, out.data() + o * total * inner + offset);
    offset += w;
  }
  const std::size_t row = total * inner;
  return make_op<T>(OpKind::Concat, std::move(out_shape), std::move(out), parts,
                    [outer, row, widths = std::move(widths)](Node<T>& self) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < widths.size(); ++k) {
                        const std::size_t w = widths[k];
                        if (detail::wants(self, k)) {
                          auto& g = self.inputs[k]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < w; ++i)
                              g[o * w + i] += self.grad[o * row + off + i];
                        }
                        off += w;
                      }
                    });
}

/// Elements [begin, end) along `axis`.
template <Scalar T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t row = s[axis] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<T> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + o * row + off, w, out.data() + o * w);
  return make_op<T>(OpKind::Slice, std::move(out_shape), std::move(out), {a},
                    [outer, row, w, off](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < w; ++i)
                          g[o * row + off + i] += self.grad[o * w + i];
                    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 2-D cross-correlation (no kernel flip). `bias` may be omitted.
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, std::size_t stride, std::size_t padding) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  const std::size_t N = input.dim(0), F = weight.dim(0);
  kernel::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                         stride, padding, 0, 0};
  if (weight.dim(1) != g.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(g.channels) +
                     " channels but weight expects " + std::to_string(weight.dim(1)) + " (" +
                     shape_str(input.shape()) + " vs " + shape_str(weight.shape()) + ")");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != F)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " for " +
                     std::to_string(F) + " filters");
  }
  g.out_h = conv_output_size(g.height, g.kernel_h, padding, stride);
  g.out_w = conv_output_size(g.width, g.kernel_w, padding, stride);

  const std::size_t R = g.patch(), P = g.positions();
  const std::size_t in_stride = g.channels * g.height * g.width;
  std::vector<T> out(N * F * P, T(0));
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* b = bias ? bias->data().data() : nullptr;
  parallel_for(N, [&](std::size_t n) {
    std::vector<T> col(R * P);
    kernel::im2col(g, x + n * in_stride, col.data());
    T* y = out.data() + n * F * P;
    if (b)
      for (std::size_t f = 0; f < F; ++f) std::fill_n(y + f * P, P, b[f]);
    kernel::gemm_nn(F, P, R, w, col.data(), y);
  });

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return make_op<T>(
      OpKind::Conv2d, {N, F, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, N, F, R, P, in_stride, has_bias](Node<T>& self) {
        const T* x = self.inputs[0]->data.data();
        const T* w = self.inputs[1]->data.data();
        const T* dy = self.grad.data();
        const bool want_x = detail::wants(self, 0);
        const bool want_w = detail::wants(self, 1);
        const bool want_b = has_bias && detail::wants(self, 2);
        T* dx = want_x ? self.inputs[0]->grad_buffer().data() : nullptr;
        // per-sample weight gradients, summed in sample order afterwards
        std::vector<T> dw_parts(want_w ? N * F * R : 0, T(0));
        parallel_for(N, [&](std::size_t n) {
          const T* dyn = dy + n * F * P;
          if (want_w) {
            std::vector<T> col(R * P);
            kernel::im2col(g, x + n * in_stride, col.data());
            const auto col_t = kernel::transposed(R, P, col.data());
            kernel::gemm_nn(F, R, P, dyn, col_t.data(), dw_parts.data() + n * F * R);
          }
          if (want_x) {
            std::vector<T> dcol(R * P, T(0));
            kernel::gemm_tn(R, P, F, w, dyn, dcol.data());
            kernel::col2im(g, dcol.data(), dx + n * in_stride);
          }
        });
        if (want_w) {
          auto& dw = self.inputs[1]->grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < F * R; ++i) dw[i] += dw_parts[n * F * R + i];
        }
        if (want_b) {
          auto& db = self.inputs[2]->grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) {
              const T* row = dy + (n * F + f) * P;
              T s = T(0);
              for (std::size_t p = 0; p < P; ++p) s += row[p];
              db[f] += s;
            }
        }
      });
}

/// Max pooling; gradient flows to the first maximal element in row-major order.
template <Scalar T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t extent, std::size_t stride) {
  detail::require_rank(input, 4, "max_pool2d");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = pool_output_size(H, extent, stride);
  const std::size_t Wo = pool_output_size(W, extent, stride);
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * stride) * W + ox * stride;
        for (std::size_t ky = 0; ky < extent; ++ky)
          for (std::size_t kx = 0; kx < extent; ++kx) {
            const std::size_t idx = (oy * stride + ky) * W + ox * stride + kx;
            if (plane[idx] > plane[best]) best = idx;
          }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = plane[best];
        argmax[o] = nc * H * W + best;
      }
    }
  }
  if (branch_tracing())
    for (auto i : argmax) record_branch(i);
  return make_op<T>(OpKind::MaxPool2d, {N, C, Ho, Wo}, std::move(out), {input},
                    [argmax = std::move(argmax)](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                    });
}

/// Per-channel spatial maximum: N x C x H x W -> N x C.
template <Scalar T>
Tensor<T> global_max_pool(const Tensor<T>& input) {
  detail::require_rank(input, 4, "global_max_pool");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (HW == 0) throw ShapeError("global_max_pool over empty spatial extent");
  std::vector<T> out(N * C);
  std::vector<std::size_t> argmax(N * C);
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x + nc * HW;
    std::size_t best = 0;
    for (std::size_t i = 1; i < HW; ++i)
      if (plane[i] > plane[best]) best = i;
    out[nc] = plane[best];
    argmax[nc] = nc * HW + best;
  }
  if (branch_tracing())
    for (auto i : argmax) record_branch(i);
  return make_op<T>(OpKind::GlobalMaxPool, {N, C}, std::move(out), {input},
                    [argmax = std::move(argmax)](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                    });
}

/// Per-channel spatial mean: N x C x H x W -> N x C.
template <Scalar T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require_rank(input, 4, "global_avg_pool");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool over empty spatial extent");
  std::vector<T> out(N * C);
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T s = T(0);
    for (std::size_t i = 0; i < HW; ++i) s += x[nc * HW + i];
    out[nc] = s / static_cast<T>(HW);
  }
  return make_op<T>(OpKind::GlobalAvgPool, {N, C}, std::move(out), {input},
                    [HW](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      const T inv = T(1) / static_cast<T>(HW);
                      for (std::size_t nc = 0; nc < self.grad.size(); ++nc)
                        for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += self.grad[nc] * inv;
                    });
}

// ---------------------------------------------------------------------------
// Batch normalization primitives (N x C x H x W, statistics per channel)

template <Scalar T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> variance;  // biased, over N*H*W
  std::size_t count = 0;
};

/// Normalizes with batch statistics, then scales by gamma and shifts by beta.
/// The batch statistics are written to `stats` for running-average updates.
template <Scalar T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T eps, BatchStats<T>* stats = nullptr) {
  detail::require_rank(x, 4, "batch_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  }
  const std::size_t m = N * HW;
  if (m < 2) {
    throw ValueError("batch_norm: training mode needs at least 2 values per channel, got " +
                     std::to_string(m));
  }
  std::vector<T> mu(C, T(0)), var(C, T(0)), inv_std(C);
  const T* xd = x.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    T s = T(0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) s += xd[(n * C + c) * HW + i];
    mu[c] = s / static_cast<T>(m);
    T v = T(0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = xd[(n * C + c) * HW + i] - mu[c];
        v += d * d;
      }
    var[c] = v / static_cast<T>(m);
    inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  }
  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        xhat[k] = (xd[k] - mu[c]) * inv_std[c];
        out[k] = gamma[c] * xhat[k] + beta[c];
      }
  if (stats) *stats = BatchStats<T>{mu, var, m};
  return make_op<T>(
      OpKind::BatchNormTrain, x.shape(), std::move(out), {x, gamma, beta},
      [N, C, HW, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gam = self.inputs[1]->data;
        const auto& dy = self.grad;
        std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = (n * C + c) * HW + i;
              sum_dy[c] += dy[k];
              sum_dy_xhat[c] += dy[k] * xhat[k];
            }
        if (detail::wants(self, 0)) {
          auto& dx = self.inputs[0]->grad_buffer();
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * C + c) * HW + i;
                dx[k] += gam[c] * inv_std[c] * inv_m *
                         (static_cast<T>(m) * dy[k] - sum_dy[c] - xhat[k] * sum_dy_xhat[c]);
              }
        }
        if (detail::wants(self, 1)) {
          auto& dg = self.inputs[1]->grad_buffer();
          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
        }
        if (detail::wants(self, 2)) {
          auto& db = self.inputs[2]->grad_buffer();
          for (std::size_t c = 0; c < C; ++c) db[c] += sum_dy[c];
        }
      });
}

/// Normalizes with fixed (running) statistics.
template <Scalar T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::span<const T> mean, std::span<const T> variance, T eps) {
  detail::require_rank(x, 4, "batch_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || mean.size() != C ||
      variance.size() != C) {
    throw ShapeError("batch_norm: per-channel parameters must have " + std::to_string(C) +
                     " entries");
  }
  std::vector<T> inv_std(C), xhat(x.size()), out(x.size());
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(variance[c] + eps);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        xhat[k] = (x[k] - mean[c]) * inv_std[c];
        out[k] = gamma[c] * xhat[k] + beta[c];
      }
  return make_op<T>(OpKind::BatchNormInfer, x.shape(), std::move(out), {x, gamma, beta},
                    [N, C, HW, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                      const auto& gam = self.inputs[1]->data;
                      const auto& dy = self.grad;
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t c = 0; c < C; ++c)
                          for (std::size_t i = 0; i < HW; ++i) {
                            const std::size_t k = (n * C + c) * HW + i;
                            if (detail::wants(self, 0))
                              self.inputs[0]->grad_buffer()[k] += dy[k] * gam[c] * inv_std[c];
                            if (detail::wants(self, 1))
                              self.inputs[1]->grad_buffer()[c] += dy[k] * xhat[k];
                            if (detail::wants(self, 2)) self.inputs[2]->grad_buffer()[c] += dy[k];
                          }
                    });
}

}  // namespace rcf
