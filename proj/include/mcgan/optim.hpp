// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mcgan/nn.hpp"

namespace mcgan {

// Adam with bias correction. Moments are kept per parameter in the order of
// the list the optimizer was built from.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(TensorList<T> params, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto var = params_[i].var;
      if (!var.has_grad()) continue;
      const Tensor<T>& g = var.grad();
      Tensor<T>& w = var.mutable_value();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
      }
    }
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }

  // Copies of the moment tensors as named entries ("<prefix>/m/<param>",
  // "<prefix>/v/<param>"). Writing into them does not touch the optimizer;
  // use load_state for that.
  TensorList<T> state(const std::string& prefix) const {
    TensorList<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({prefix + "/m/" + params_[i].name, Var<T>::leaf(m_[i]), false});
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({prefix + "/v/" + params_[i].name, Var<T>::leaf(v_[i]), false});
    }
    return out;
  }

  void load_state(const TensorList<T>& state) {
    if (state.size() != 2 * params_.size()) throw FormatError("optimizer state size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (state[i].var.shape() != m_[i].shape() || state[i + params_.size()].var.shape() != v_[i].shape()) {
        throw FormatError("optimizer state shape mismatch at " + params_[i].name);
      }
      m_[i] = state[i].var.value();
      v_[i] = state[i + params_.size()].var.value();
    }
  }

  const TensorList<T>& params() const { return params_; }

 private:
  TensorList<T> params_;
  std::vector<Tensor<T>> m_, v_;
  double beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
};

}  // namespace mcgan
