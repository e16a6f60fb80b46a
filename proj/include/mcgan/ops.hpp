// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operators. Every op checks shapes, computes its value and
// registers a backward closure through make_result().

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "mcgan/autograd.hpp"

namespace mcgan::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <class T>
using CArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const Shape& a, std::size_t r, const char* op) {
  if (a.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a));
  }
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* s = a.data();
  T* d = out.data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) d[i] = f(s[i]);
  return out;
}

// Unfold one C×H×W sample into a (C·k·k) × (Ho·Wo) row-major matrix.
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = plane + iy * W;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(Wo, W + pad - kx);
            std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::memcpy(dst + lo, src + lo - pad + kx, sizeof(T) * (hi - lo));
            std::fill(dst + std::max(lo, hi), dst + Wo, T(0));
          } else {
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    T* plane = x + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = plane + iy * W;
          const T* src = row + oy * Wo;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(Wo, W + pad - kx);
            T* d = dst + kx - pad;
            for (int ox = lo; ox < hi; ++ox) d[ox] += src[ox];
            continue;
          }
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    if (b.requires_grad()) accumulate(b, detail::map(g, [](T v) { return -v; }));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.value()[i];
      accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a.value()[i];
      accumulate(b, gb);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(detail::map(a.value(), [s](T v) { return v * s; }), {a},
                        [a, s](const Tensor<T>& g) { accumulate(a, detail::map(g, [s](T v) { return v * s; })); });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return make_result<T>(detail::map(a.value(), [s](T v) { return v + s; }), {a},
                        [a](const Tensor<T>& g) { accumulate(a, g); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return make_result<T>(detail::map(a.value(), [](T v) { return v > T(0) ? v : T(0); }), {a},
                        [a](const Tensor<T>& g) {
                          Tensor<T> d(g.shape());
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] = a.value()[i] > T(0) ? g[i] : T(0);
                          accumulate(a, d);
                        });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return make_result<T>(detail::map(a.value(), [slope](T v) { return v > T(0) ? v : slope * v; }), {a},
                        [a, slope](const Tensor<T>& g) {
                          Tensor<T> d(g.shape());
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            d[i] = a.value()[i] > T(0) ? g[i] : slope * g[i];
                          }
                          accumulate(a, d);
                        });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = detail::map(a.value(), [](T v) { return sigmoid_scalar(v); });
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {a}, [a, y](const Tensor<T>& g) {
    Tensor<T> d(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (*y)[i] * (T(1) - (*y)[i]);
    accumulate(a, d);
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = detail::map(a.value(), [](T v) { return std::tanh(v); });
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {a}, [a, y](const Tensor<T>& g) {
    Tensor<T> d(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (T(1) - (*y)[i] * (*y)[i]);
    accumulate(a, d);
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out = detail::map(a.value(), [](T v) { return std::exp(v); });
  auto y = std::make_shared<Tensor<T>>(out);
  return make_result<T>(std::move(out), {a}, [a, y](const Tensor<T>& g) {
    Tensor<T> d(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (*y)[i];
    accumulate(a, d);
  });
}

// ---- reductions ------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>({1}, s), {a}, [a](const Tensor<T>& g) {
    accumulate(a, Tensor<T>(a.shape(), g[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

// Sum of scalar vars.
template <class T>
Var<T> add_all(const std::vector<Var<T>>& terms) {
  detail::require(!terms.empty(), "add_all: no terms");
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// ---- shape manipulation ----------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [a](const Tensor<T>& g) { accumulate(a, g.reshaped(a.shape())); });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + static_cast<std::size_t>(n) * Ca * HW, Ca * HW,
                out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + static_cast<std::size_t>(n) * Cb * HW, Cb * HW,
                out.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * HW);
  }
  return make_result<T>(std::move(out), {a, b}, [a, b, N, Ca, Cb, HW](const Tensor<T>& g) {
    Tensor<T> ga(a.shape()), gb(b.shape());
    for (int n = 0; n < N; ++n) {
      std::copy_n(g.data() + static_cast<std::size_t>(n) * (Ca + Cb) * HW, Ca * HW,
                  ga.data() + static_cast<std::size_t>(n) * Ca * HW);
      std::copy_n(g.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * HW, Cb * HW,
                  gb.data() + static_cast<std::size_t>(n) * Cb * HW);
    }
    accumulate(a, ga);
    accumulate(b, gb);
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& a, int start, int count) {
  detail::require_rank(a.shape(), 4, "slice_channels");
  const int N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  detail::require(start >= 0 && count > 0 && start + count <= C, "slice_channels: range out of bounds");
  Tensor<T> out({N, count, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + (static_cast<std::size_t>(n) * C + start) * HW, count * HW,
                out.data() + static_cast<std::size_t>(n) * count * HW);
  }
  return make_result<T>(std::move(out), {a}, [a, N, C, HW, start, count](const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (int n = 0; n < N; ++n) {
      std::copy_n(g.data() + static_cast<std::size_t>(n) * count * HW, count * HW,
                  ga.data() + (static_cast<std::size_t>(n) * C + start) * HW);
    }
    accumulate(a, ga);
  });
}

// [B, C] -> [B, C, H, W], copying each code to every spatial site.
template <class T>
Var<T> replicate_spatial(const Var<T>& v, int H, int W) {
  detail::require_rank(v.shape(), 2, "replicate_spatial");
  const int B = v.dim(0), C = v.dim(1), HW = H * W;
  Tensor<T> out({B, C, H, W});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      std::fill_n(out.data() + (static_cast<std::size_t>(b) * C + c) * HW, HW, v.value()[b * C + c]);
    }
  }
  return make_result<T>(std::move(out), {v}, [v, B, C, HW](const Tensor<T>& g) {
    Tensor<T> gv(v.shape());
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const T* src = g.data() + (static_cast<std::size_t>(b) * C + c) * HW;
        T s = 0;
        for (int i = 0; i < HW; ++i) s += src[i];
        gv[b * C + c] = s;
      }
    }
    accumulate(v, gv);
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  detail::require_rank(a.shape(), 4, "upsample_nearest2x");
  const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  const std::size_t planes = static_cast<std::size_t>(N) * C;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = a.value().data() + p * H * W;
    T* dst = out.data() + p * 4 * H * W;
    for (int y = 0; y < 2 * H; ++y) {
      for (int x = 0; x < 2 * W; ++x) dst[y * 2 * W + x] = src[(y / 2) * W + x / 2];
    }
  }
  return make_result<T>(std::move(out), {a}, [a, planes, H, W](const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = g.data() + p * 4 * H * W;
      T* dst = ga.data() + p * H * W;
      for (int y = 0; y < 2 * H; ++y) {
        for (int x = 0; x < 2 * W; ++x) dst[(y / 2) * W + x / 2] += src[y * 2 * W + x];
      }
    }
    accumulate(a, ga);
  });
}

// ---- dense layers ----------------------------------------------------------

// x [B, In], weight [Out, In], optional bias [Out] -> [B, Out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(weight.shape(), 2, "linear");
  const int B = x.dim(0), In = x.dim(1), Out = weight.dim(0);
  detail::require(weight.dim(1) == In, "linear: input width " + std::to_string(In) + " vs weight " +
                                            shape_str(weight.shape()));
  if (bias) detail::require(bias->shape() == Shape{Out}, "linear: bias shape " + shape_str(bias->shape()));
  Tensor<T> out({B, Out});
  {
    detail::CMapMat<T> X(x.value().data(), B, In), Wm(weight.value().data(), Out, In);
    detail::MapMat<T> Y(out.data(), B, Out);
    Y.noalias() = X * Wm.transpose();
    if (bias) {
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Out; ++o) Y(b, o) += bias->value()[o];
      }
    }
  }
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_result<T>(std::move(out), parents, [x, weight, bias, B, In, Out](const Tensor<T>& g) {
    detail::CMapMat<T> G(g.data(), B, Out);
    if (x.requires_grad()) {
      Tensor<T> gx(x.shape());
      detail::MapMat<T>(gx.data(), B, In).noalias() = G * detail::CMapMat<T>(weight.value().data(), Out, In);
      accumulate(x, gx);
    }
    if (weight.requires_grad()) {
      Tensor<T> gw(weight.shape());
      detail::MapMat<T>(gw.data(), Out, In).noalias() =
          G.transpose() * detail::CMapMat<T>(x.value().data(), B, In);
      accumulate(weight, gw);
    }
    if (bias && bias->requires_grad()) {
      Tensor<T> gb(bias->shape());
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Out; ++o) gb[o] += G(b, o);
      }
      accumulate(*bias, gb);
    }
  });
}

// x [N, Cin, H, W], weight [Cout, Cin, k, k], optional bias [Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, int stride, int pad) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(weight.shape(), 4, "conv2d");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == Cin && weight.dim(3) == k,
                  "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  detail::require(Ho > 0 && Wo > 0, "conv2d: kernel larger than padded input " + shape_str(x.shape()));
  if (bias) detail::require(bias->shape() == Shape{Cout}, "conv2d: bias shape " + shape_str(bias->shape()));
  const int K = Cin * k * k, P = Ho * Wo;

  // The unfolded input is kept for the weight gradient when it will be needed.
  const bool keep_cols = grad_enabled() && weight.requires_grad();
  const std::size_t per_sample = static_cast<std::size_t>(K) * P;
  auto cols = std::make_shared<AlignedVector<T>>(keep_cols ? per_sample * N : per_sample);
  Tensor<T> out({N, Cout, Ho, Wo});
  detail::CMapMat<T> Wm(weight.value().data(), Cout, K);
  for (int n = 0; n < N; ++n) {
    T* c = cols->data() + (keep_cols ? per_sample * n : 0);
    detail::im2col(x.value().data() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, k, stride, pad, Ho,
                   Wo, c);
    detail::MapMat<T> Y(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
    Y.noalias() = Wm * detail::CMapMat<T>(c, K, P);
    if (bias) {
      for (int o = 0; o < Cout; ++o) Y.row(o).array() += bias->value()[o];
    }
  }
  if (!keep_cols) cols.reset();

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_result<T>(
      std::move(out), parents,
      [x, weight, bias, cols, N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, K, P, per_sample](const Tensor<T>& g) {
        AlignedVector<T> dcols(x.requires_grad() ? per_sample : 0);
        detail::CMapMat<T> Wm(weight.value().data(), Cout, K);
        Tensor<T> gx(x.requires_grad() ? x.shape() : Shape{0});
        detail::RowMat<T> gw;
        if (weight.requires_grad()) gw = detail::RowMat<T>::Zero(Cout, K);
        for (int n = 0; n < N; ++n) {
          detail::CMapMat<T> G(g.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
          if (weight.requires_grad()) {
            gw.noalias() += G * detail::CMapMat<T>(cols->data() + per_sample * n, K, P).transpose();
          }
          if (x.requires_grad()) {
            detail::MapMat<T>(dcols.data(), K, P).noalias() = Wm.transpose() * G;
            detail::col2im(dcols.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                           gx.data() + static_cast<std::size_t>(n) * Cin * H * W);
          }
        }
        if (x.requires_grad()) accumulate(x, std::move(gx));
        if (weight.requires_grad()) {
          accumulate(weight, Tensor<T>(weight.shape(), AlignedVector<T>(gw.data(), gw.data() + gw.size())));
        }
        if (bias && bias->requires_grad()) {
          Tensor<T> gb(bias->shape());
          for (int n = 0; n < N; ++n) {
            for (int o = 0; o < Cout; ++o) {
              const T* src = g.data() + (static_cast<std::size_t>(n) * Cout + o) * P;
              T s = 0;
              for (int i = 0; i < P; ++i) s += src[i];
              gb[o] += s;
            }
          }
          accumulate(*bias, gb);
        }
      });
}

// Per-channel batch normalization over (N, H, W) for rank-4 input, or per
// feature over N for rank-2 input. In training mode the running statistics
// are updated in place (unbiased variance, PyTorch convention).
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Var<T>& running_mean,
                  Var<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.value().rank() == 4 || x.value().rank() == 2, "batch_norm: rank must be 2 or 4");
  const int N = x.dim(0), C = x.dim(1);
  const int S = x.value().rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "batch_norm: affine shape mismatch");
  const std::size_t count = static_cast<std::size_t>(N) * S;
  auto idx = [C, S](int n, int c) { return (static_cast<std::size_t>(n) * C + c) * S; };

  std::vector<T> mean(C), inv_std(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T s = 0;
      for (int n = 0; n < N; ++n) s += detail::CArr<T>(x.value().data() + idx(n, c), S).sum();
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (int n = 0; n < N; ++n) v += (detail::CArr<T>(x.value().data() + idx(n, c), S) - m).square().sum();
      const T var = v / static_cast<T>(count);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
      auto& rm = running_mean.mutable_value();
      auto& rv = running_var.mutable_value();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * m;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.value()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.value()[c] + eps);
    }
  }

  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.value().data() + idx(n, c);
      T* h = xhat.data() + idx(n, c);
      T* o = out.data() + idx(n, c);
      const T ga = gamma.value()[c], be = beta.value()[c];
      for (int i = 0; i < S; ++i) {
        h[i] = (p[i] - mean[c]) * inv_std[c];
        o[i] = ga * h[i] + be;
      }
    }
  }
  auto saved = std::make_shared<Tensor<T>>(std::move(xhat));
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, saved, inv_std, training, N, C, S, count, idx](const Tensor<T>& g) {
        std::vector<T> sum_g(C, T(0)), sum_gh(C, T(0));
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c) {
            detail::CArr<T> gp(g.data() + idx(n, c), S);
            detail::CArr<T> h(saved->data() + idx(n, c), S);
            sum_g[c] += gp.sum();
            sum_gh[c] += (gp * h).sum();
          }
        }
        if (gamma.requires_grad()) accumulate(gamma, Tensor<T>({C}, sum_gh));
        if (beta.requires_grad()) accumulate(beta, Tensor<T>({C}, sum_g));
        if (!x.requires_grad()) return;
        Tensor<T> gx(x.shape());
        const T inv_count = T(1) / static_cast<T>(count);
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c) {
            const T* gp = g.data() + idx(n, c);
            const T* h = saved->data() + idx(n, c);
            T* d = gx.data() + idx(n, c);
            const T k = gamma.value()[c] * inv_std[c];
            if (training) {
              const T mg = sum_g[c] * inv_count, mgh = sum_gh[c] * inv_count;
              for (int i = 0; i < S; ++i) d[i] = k * (gp[i] - mg - h[i] * mgh);
            } else {
              for (int i = 0; i < S; ++i) d[i] = k * gp[i];
            }
          }
        }
        accumulate(x, std::move(gx));
      });
}

// ---- loss primitives -------------------------------------------------------

// Batch mean of (s - target)^2 for a vector of per-sample scores.
template <class T>
Var<T> mean_squared_to(const Var<T>& scores, T target) {
  const std::size_t n = scores.value().size();
  detail::require(n > 0, "mean_squared_to: empty scores");
  T s = 0;
  for (T v : scores.value().values()) s += (v - target) * (v - target);
  return make_result<T>(Tensor<T>({1}, s / static_cast<T>(n)), {scores}, [scores, target, n](const Tensor<T>& g) {
    Tensor<T> d(scores.shape());
    for (std::size_t i = 0; i < n; ++i) d[i] = g[0] * T(2) * (scores.value()[i] - target) / static_cast<T>(n);
    accumulate(scores, d);
  });
}

// Batch mean of the closed-form KL(N(mu, diag sigma^2) || N(0, I)).
template <class T>
Var<T> kl_normal(const Var<T>& mu, const Var<T>& sigma) {
  detail::require_rank(mu.shape(), 2, "kl_normal");
  detail::require_same(mu.shape(), sigma.shape(), "kl_normal");
  const int B = mu.dim(0);
  T s = 0;
  for (std::size_t i = 0; i < mu.value().size(); ++i) {
    const T m = mu.value()[i], sd = sigma.value()[i];
    if (!(sd > T(0))) throw std::invalid_argument("kl_normal: sigma must be positive");
    s += T(0.5) * (m * m + sd * sd - T(2) * std::log(sd) - T(1));
  }
  return make_result<T>(Tensor<T>({1}, s / static_cast<T>(B)), {mu, sigma}, [mu, sigma, B](const Tensor<T>& g) {
    const T k = g[0] / static_cast<T>(B);
    if (mu.requires_grad()) accumulate(mu, detail::map(mu.value(), [k](T m) { return k * m; }));
    if (sigma.requires_grad()) {
      accumulate(sigma, detail::map(sigma.value(), [k](T sd) { return k * (sd - T(1) / sd); }));
    }
  });
}

// sum(|x - b| * sel) / batch, with sel [N,1,H,W] broadcast over channels.
// Only x receives a gradient; b and sel are constants.
template <class T>
Var<T> masked_l1(const Var<T>& x, const Tensor<T>& b, const Tensor<T>& sel) {
  detail::require_same(x.shape(), b.shape(), "masked_l1");
  detail::require_rank(x.shape(), 4, "masked_l1");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(sel.shape() == Shape({N, 1, x.dim(2), x.dim(3)}),
                  "masked_l1: selector " + shape_str(sel.shape()) + " vs image " + shape_str(x.shape()));
  T s = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T* sp = sel.data() + static_cast<std::size_t>(n) * HW;
      for (int i = 0; i < HW; ++i) s += std::abs(x.value()[off + i] - b[off + i]) * sp[i];
    }
  }
  auto bb = std::make_shared<Tensor<T>>(b);
  auto ss = std::make_shared<Tensor<T>>(sel);
  return make_result<T>(Tensor<T>({1}, s / static_cast<T>(N)), {x}, [x, bb, ss, N, C, HW](const Tensor<T>& g) {
    Tensor<T> d(x.shape());
    const T k = g[0] / static_cast<T>(N);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
        const T* sp = ss->data() + static_cast<std::size_t>(n) * HW;
        for (int i = 0; i < HW; ++i) {
          const T diff = x.value()[off + i] - (*bb)[off + i];
          d[off + i] = diff > T(0) ? k * sp[i] : (diff < T(0) ? -k * sp[i] : T(0));
        }
      }
    }
    accumulate(x, d);
  });
}

}  // namespace mcgan::ops
