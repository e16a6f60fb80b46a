// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers. Layers own their weights as Var leaves and expose
// them through collect(), which appends (name, handle) pairs in a stable
// order. Copying a layer shares weights; use clone_into() for deep copies.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcgan/ops.hpp"
#include "mcgan/random.hpp"

namespace mcgan {

template <class T>
struct NamedTensor {
  std::string name;
  Var<T> var;
  bool trainable = true;
};

template <class T>
using TensorList = std::vector<NamedTensor<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "/" + name;
}

// Weight initialization used by every layer: N(0, 0.02) for kernels.
inline constexpr double kInitStd = 0.02;

template <class T>
Var<T> make_param(Tensor<T> t) {
  return Var<T>::leaf(std::move(t), true);
}

template <class T>
Var<T> make_buffer(Tensor<T> t) {
  return Var<T>::leaf(std::move(t), false);
}

template <class T>
struct Linear {
  Var<T> weight;
  std::optional<Var<T>> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true)
      : weight(make_param(rng.normal_tensor<T>({out, in}, 0.0, kInitStd))) {
    if (with_bias) bias = make_param(Tensor<T>({out}));
  }

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight, true});
    if (bias) out.push_back({join_name(prefix, "bias"), *bias, true});
  }
};

template <class T>
struct Conv2d {
  Var<T> weight;
  std::optional<Var<T>> bias;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng, bool with_bias)
      : weight(make_param(rng.normal_tensor<T>({out, in, kernel, kernel}, 0.0, kInitStd))),
        stride(stride_),
        pad(pad_) {
    if (with_bias) bias = make_param(Tensor<T>({out}));
  }

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({join_name(prefix, "weight"), weight, true});
    if (bias) out.push_back({join_name(prefix, "bias"), *bias, true});
  }
};

template <class T>
struct BatchNorm {
  Var<T> gamma, beta;
  Var<T> running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(int channels)
      : gamma(make_param(Tensor<T>({channels}, T(1)))),
        beta(make_param(Tensor<T>({channels}))),
        running_mean(make_buffer(Tensor<T>({channels}))),
        running_var(make_buffer(Tensor<T>({channels}, T(1)))) {}

  int channels() const { return gamma.dim(0); }

  Var<T> operator()(const Var<T>& x, bool training) {
    return ops::batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({join_name(prefix, "gamma"), gamma, true});
    out.push_back({join_name(prefix, "beta"), beta, true});
    out.push_back({join_name(prefix, "running_mean"), running_mean, false});
    out.push_back({join_name(prefix, "running_var"), running_var, false});
  }
};

// Copy every tensor value of `src` into the matching entry of `dst`.
template <class T>
void copy_values(const TensorList<T>& src, TensorList<T>& dst) {
  if (src.size() != dst.size()) throw ShapeError("copy_values: tensor lists differ in length");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].var.shape() != dst[i].var.shape()) {
      throw ShapeError("copy_values: mismatch at " + src[i].name);
    }
    dst[i].var.mutable_value() = src[i].var.value();
  }
}

template <class T>
void zero_grads(const TensorList<T>& list) {
  for (auto nt : list) nt.var.zero_grad();
}

}  // namespace mcgan
