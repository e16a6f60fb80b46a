// SPDX-License-Identifier: Apache-2.0
//
// Least-squares discriminator losses over the four tuple classes, the
// generator objective with KL and eroded-background L1 terms, and the
// image-text-only variant used without masks.

#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcgan/hyperparams.hpp"
#include "mcgan/ops.hpp"

namespace mcgan {

struct SelectorParams {
  int kernel = 3;
  int iterations = 1;
  double threshold = 0.5;

  void validate() const {
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("erosion kernel must be odd and >= 1");
    if (iterations < 0) throw std::invalid_argument("erosion iterations must be >= 0");
  }
};

// One k x k square erosion of a binary H x W plane; pixels outside the frame
// count as off, so erosion also shrinks away from the border.
inline void erode_plane(std::vector<unsigned char>& plane, int H, int W, int k) {
  const int r = k / 2;
  std::vector<unsigned char> rows(plane.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      unsigned char v = 1;
      for (int d = -r; d <= r && v; ++d) {
        const int xx = x + d;
        v = (xx >= 0 && xx < W) ? plane[y * W + xx] : 0;
      }
      rows[y * W + x] = v;
    }
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      unsigned char v = 1;
      for (int d = -r; d <= r && v; ++d) {
        const int yy = y + d;
        v = (yy >= 0 && yy < H) ? rows[yy * W + x] : 0;
      }
      plane[y * W + x] = v;
    }
  }
}

// Binarize the object mask at theta, take the background complement and erode
// it `iterations` times. mask is [N, 1, H, W]; result has the same shape with
// values in {0, 1}.
template <class T>
Tensor<T> background_selector(const Tensor<T>& mask, const SelectorParams& p = {}) {
  p.validate();
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("background_selector: mask " + shape_str(mask.shape()));
  const int N = mask.dim(0), H = mask.dim(2), W = mask.dim(3);
  Tensor<T> out(mask.shape());
  std::vector<unsigned char> plane(static_cast<std::size_t>(H) * W);
  for (int n = 0; n < N; ++n) {
    auto src = mask.sample(n);
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = src[i] >= static_cast<T>(p.threshold) ? 0 : 1;
    for (int it = 0; it < p.iterations; ++it) erode_plane(plane, H, W, p.kernel);
    auto dst = out.sample(n);
    for (std::size_t i = 0; i < plane.size(); ++i) dst[i] = static_cast<T>(plane[i]);
  }
  return out;
}

// sum |x - b| over selected pixels and all channels, divided by batch size.
// The selector is a constant: no gradient reaches the mask that produced it.
template <class T>
Var<T> l1_background(const Var<T>& x, const Tensor<T>& b, const Tensor<T>& selector) {
  return ops::masked_l1(x, b, selector);
}

// Per-sample scores ([B] vectors) for every tuple class each head consumes.
template <class T>
struct TupleScores {
  Var<T> d1_real, d1_fake;
  Var<T> d2_real, d2_mismatch_mask, d2_fake;
  Var<T> d3_real, d3_mismatch_text, d3_mismatch_mask, d3_fake;
};

template <class T>
struct DiscriminatorLosses {
  Var<T> d1, d2, d3;
  Var<T> total() const { return ops::add(ops::add(d1, d2), d3); }
};

namespace detail {
template <class T>
const Var<T>& need(const Var<T>& v, const char* what) {
  if (!v.defined()) throw std::invalid_argument(std::string("missing tuple class: ") + what);
  return v;
}
}  // namespace detail

template <class T>
DiscriminatorLosses<T> loss_D(const TupleScores<T>& s) {
  using detail::need;
  DiscriminatorLosses<T> out;
  out.d3 = ops::add_all<T>({ops::mean_squared_to(need(s.d3_real, "d3 matching"), T(1)),
                            ops::mean_squared_to(need(s.d3_mismatch_text, "d3 mismatching text"), T(0)),
                            ops::mean_squared_to(need(s.d3_mismatch_mask, "d3 mismatching mask"), T(0)),
                            ops::mean_squared_to(need(s.d3_fake, "d3 fake"), T(0))});
  out.d2 = ops::add_all<T>({ops::mean_squared_to(need(s.d2_real, "d2 matching"), T(1)),
                            ops::mean_squared_to(need(s.d2_mismatch_mask, "d2 mismatching mask"), T(0)),
                            ops::mean_squared_to(need(s.d2_fake, "d2 fake"), T(0))});
  out.d1 = ops::add(ops::mean_squared_to(need(s.d1_real, "d1 real"), T(1)),
                    ops::mean_squared_to(need(s.d1_fake, "d1 fake"), T(0)));
  return out;
}

template <class T>
struct GeneratorLoss {
  Var<T> total;
  Var<T> adversarial;
  Var<T> kl;
  Var<T> l1_bg;
};

// E[(D1-1)^2 + (D2-1)^2 + (D3-1)^2] + lambda1 * KL + lambda2 * L1_bg, with the
// selector built from the generated mask.
template <class T>
GeneratorLoss<T> loss_G(const Var<T>& d1_fake, const Var<T>& d2_fake, const Var<T>& d3_fake, const Var<T>& mu,
                        const Var<T>& sigma, const Var<T>& x_g, const Tensor<T>& s_g, const Tensor<T>& b,
                        double lambda1, double lambda2, const SelectorParams& sel = {}) {
  if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("loss_G: lambda values must be non-negative");
  GeneratorLoss<T> out;
  out.adversarial = ops::add_all<T>({ops::mean_squared_to(detail::need(d1_fake, "d1 fake"), T(1)),
                                     ops::mean_squared_to(detail::need(d2_fake, "d2 fake"), T(1)),
                                     ops::mean_squared_to(detail::need(d3_fake, "d3 fake"), T(1))});
  out.kl = ops::kl_normal(mu, sigma);
  out.l1_bg = l1_background(x_g, b, background_selector(s_g, sel));
  out.total = ops::add_all<T>({out.adversarial, ops::scale(out.kl, static_cast<T>(lambda1)),
                               ops::scale(out.l1_bg, static_cast<T>(lambda2))});
  return out;
}

// Image-text only variant: D1 on images, D3' on image-text pairs.
template <class T>
struct NoMaskScores {
  Var<T> d1_real, d1_fake;
  Var<T> d3_real, d3_mismatch_text, d3_fake;
};

template <class T>
struct NoMaskLosses {
  Var<T> discriminator;
  GeneratorLoss<T> generator;
};

template <class T>
Var<T> loss_D_no_mask(const NoMaskScores<T>& s) {
  using detail::need;
  return ops::add_all<T>({ops::mean_squared_to(need(s.d1_real, "d1 real"), T(1)),
                          ops::mean_squared_to(need(s.d1_fake, "d1 fake"), T(0)),
                          ops::mean_squared_to(need(s.d3_real, "d3 matching"), T(1)),
                          ops::mean_squared_to(need(s.d3_mismatch_text, "d3 mismatching text"), T(0)),
                          ops::mean_squared_to(need(s.d3_fake, "d3 fake"), T(0))});
}

template <class T>
GeneratorLoss<T> loss_G_no_mask(const Var<T>& d1_fake, const Var<T>& d3_fake, const Var<T>& mu, const Var<T>& sigma,
                                double lambda1) {
  if (lambda1 < 0) throw std::invalid_argument("loss_G: lambda values must be non-negative");
  GeneratorLoss<T> out;
  out.adversarial = ops::add(ops::mean_squared_to(detail::need(d1_fake, "d1 fake"), T(1)),
                             ops::mean_squared_to(detail::need(d3_fake, "d3 fake"), T(1)));
  out.kl = ops::kl_normal(mu, sigma);
  out.l1_bg = Var<T>::constant(Tensor<T>({1}));
  out.total = ops::add(out.adversarial, ops::scale(out.kl, static_cast<T>(lambda1)));
  return out;
}

// Both objectives of the mask-free variant; rejects mask-enabled configs.
template <class T>
NoMaskLosses<T> loss_no_mask_variant(const Hyperparams& hp, const NoMaskScores<T>& s, const Var<T>& mu,
                                     const Var<T>& sigma) {
  if (hp.with_mask) throw ConfigError("loss_no_mask_variant called with with_mask = true");
  return {loss_D_no_mask(s), loss_G_no_mask(s.d1_fake, s.d3_fake, mu, sigma, hp.lambda1)};
}

}  // namespace mcgan
