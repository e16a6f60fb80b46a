// SPDX-License-Identifier: Apache-2.0
//
// Three-headed least-squares discriminator. D1 scores the image code, D2 the
// image-mask code and D3 the image-mask code fused with a text code. Heads
// are full-spatial-kernel convolutions emitting raw (unsquashed) scores.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mcgan/hyperparams.hpp"
#include "mcgan/nn.hpp"

namespace mcgan {

inline constexpr double kLeakySlope = 0.2;

// N stride-2 3x3 convs, channels base * 2^i, LeakyReLU(0.2); BN on all but the first.
template <class T>
struct DownEncoder {
  std::vector<Conv2d<T>> convs;
  std::vector<std::optional<BatchNorm<T>>> bns;
  int in_channels = 0, input_size = 0;

  DownEncoder() = default;
  DownEncoder(int in, int base, int layers, int input_size_, Rng& rng) : in_channels(in), input_size(input_size_) {
    int c_in = in, c_out = base;
    for (int i = 0; i < layers; ++i) {
      const bool first = i == 0;
      convs.emplace_back(c_in, c_out, 3, 2, 1, rng, first);
      bns.push_back(first ? std::nullopt : std::optional<BatchNorm<T>>(BatchNorm<T>(c_out)));
      c_in = c_out;
      c_out *= 2;
    }
  }

  Var<T> operator()(const Var<T>& x, bool training) {
    if (x.value().rank() != 4 || x.dim(1) != in_channels || x.dim(2) != input_size || x.dim(3) != input_size) {
      throw ShapeError("discriminator encoder: expected [B," + std::to_string(in_channels) + "," +
                       std::to_string(input_size) + "," + std::to_string(input_size) + "], got " +
                       shape_str(x.shape()));
    }
    Var<T> h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = convs[i](h);
      if (bns[i]) h = (*bns[i])(h, training);
      h = ops::leaky_relu(h, static_cast<T>(kLeakySlope));
    }
    return h;
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(join_name(prefix, "conv" + std::to_string(i)), out);
      if (bns[i]) bns[i]->collect(join_name(prefix, "bn" + std::to_string(i)), out);
    }
  }
};

template <class T>
class Discriminator {
 public:
  Discriminator(const Hyperparams& hp, Rng& rng) : hp_(hp) {
    hp_.validate();
    const int terminal = hp_.disc_terminal_channels();
    const int s = hp_.disc_code_size();
    image_enc_ = DownEncoder<T>(3, hp_.disc_channels, hp_.blocks, hp_.width, rng);
    if (hp_.with_mask) image_mask_enc_ = DownEncoder<T>(4, hp_.disc_channels, hp_.blocks, hp_.width, rng);
    text_mu_ = Linear<T>(hp_.embed_dim, hp_.code_dim, rng);
    fuse_conv_ = Conv2d<T>(terminal + hp_.code_dim, terminal, 3, 1, 1, rng, false);
    fuse_bn_ = BatchNorm<T>(terminal);
    head1_ = Conv2d<T>(terminal, 1, s, 1, 0, rng, true);
    if (hp_.with_mask) head2_ = Conv2d<T>(terminal, 1, s, 1, 0, rng, true);
    head3_ = Conv2d<T>(terminal, 1, s, 1, 0, rng, true);
  }

  const Hyperparams& hyperparams() const { return hp_; }
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  Var<T> encode_image(const Var<T>& x) { return image_enc_(x, training_); }

  Var<T> encode_image_mask(const Var<T>& x, const Var<T>& s) {
    if (!hp_.with_mask) throw ConfigError("encode_image_mask: discriminator built without mask path");
    if (s.value().rank() != 4 || s.dim(1) != 1 || s.dim(0) != x.dim(0) || s.dim(2) != x.dim(2) ||
        s.dim(3) != x.dim(3)) {
      throw ShapeError("encode_image_mask: mask " + shape_str(s.shape()) + " vs image " + shape_str(x.shape()));
    }
    return image_mask_enc_(ops::concat_channels(x, s), training_);
  }

  // Deterministic text code: the mean branch of an affine conditioning map.
  Var<T> text_code(const Var<T>& phi) {
    if (phi.value().rank() != 2 || phi.dim(1) != hp_.embed_dim) {
      throw ShapeError("discriminator text code: embedding " + shape_str(phi.shape()));
    }
    return text_mu_(phi);
  }

  Var<T> fuse_text(const Var<T>& code, const Var<T>& text) {
    const int s = hp_.disc_code_size();
    if (code.value().rank() != 4 || code.dim(1) != hp_.disc_terminal_channels() || code.dim(2) != s ||
        code.dim(3) != s) {
      throw ShapeError("fuse_text: code " + shape_str(code.shape()));
    }
    if (text.value().rank() != 2 || text.dim(0) != code.dim(0) || text.dim(1) != hp_.code_dim) {
      throw ShapeError("fuse_text: text code " + shape_str(text.shape()));
    }
    auto joint = ops::concat_channels(code, ops::replicate_spatial(text, s, s));
    return ops::leaky_relu(fuse_bn_(fuse_conv_(joint), training_), static_cast<T>(kLeakySlope));
  }

  // Heads return one score per sample, shape [B].
  Var<T> head1(const Var<T>& code) const { return flatten(head1_(code)); }
  Var<T> head2(const Var<T>& code) const {
    if (!hp_.with_mask) throw ConfigError("head2: discriminator built without mask path");
    return flatten(head2_(code));
  }
  Var<T> head3(const Var<T>& joint) const { return flatten(head3_(joint)); }

  // Convenience single-tuple scoring.
  struct Scores {
    Var<T> d1, d2, d3;
  };
  Scores score(const Var<T>& x, const Var<T>& s, const Var<T>& phi) {
    Scores out;
    out.d1 = head1(encode_image(x));
    if (hp_.with_mask) {
      auto im = encode_image_mask(x, s);
      out.d2 = head2(im);
      out.d3 = head3(fuse_text(im, text_code(phi)));
    } else {
      out.d3 = head3(fuse_text(encode_image(x), text_code(phi)));
    }
    return out;
  }

  TensorList<T> tensors() const {
    TensorList<T> out;
    image_enc_.collect("discriminator/image", out);
    if (hp_.with_mask) image_mask_enc_.collect("discriminator/image_mask", out);
    text_mu_.collect("discriminator/text_mu", out);
    fuse_conv_.collect("discriminator/fuse_conv", out);
    fuse_bn_.collect("discriminator/fuse_bn", out);
    head1_.collect("discriminator/head1", out);
    if (hp_.with_mask) head2_.collect("discriminator/head2", out);
    head3_.collect("discriminator/head3", out);
    return out;
  }

  TensorList<T> trainable() const {
    TensorList<T> out;
    for (auto& nt : tensors()) {
      if (nt.trainable) out.push_back(nt);
    }
    return out;
  }

 private:
  static Var<T> flatten(const Var<T>& v) { return ops::reshape(v, {v.dim(0)}); }

  Hyperparams hp_;
  bool training_ = true;
  DownEncoder<T> image_enc_, image_mask_enc_;
  Linear<T> text_mu_;
  Conv2d<T> fuse_conv_;
  BatchNorm<T> fuse_bn_;
  Conv2d<T> head1_, head2_, head3_;
};

}  // namespace mcgan
