// SPDX-License-Identifier: Apache-2.0
//
// Generator: seed map from [c_hat | z], an activation-free background
// pyramid, a chain of switch-gated synthesis blocks and a 4-channel head
// (RGB + mask). The stacked variant appends a second stage that refines a
// 64x64x64 stage-1 feature map into a 128x128 output.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcgan/embedding.hpp"
#include "mcgan/hyperparams.hpp"
#include "mcgan/nn.hpp"

namespace mcgan {

template <class T>
struct GenOutput {
  Var<T> image;                 // [B, 3, W, H] in [-1, 1]
  Var<T> mask;                  // [B, 1, W, H] in [0, 1]
  std::vector<Var<T>> switches; // one per block, coarse to fine
  Var<T> final_feature;         // input of the output head
  std::vector<Var<T>> fg_features;  // FG map entering each block, then the block-N output
};

namespace detail {

// Split a 4-channel head output into tanh RGB and logistic mask.
template <class T>
std::pair<Var<T>, Var<T>> squash_head(const Var<T>& raw) {
  return {ops::tanh(ops::slice_channels(raw, 0, 3)), ops::sigmoid(ops::slice_channels(raw, 3, 1))};
}

template <class T>
Var<T> constant_like(const Shape& shape, T value) {
  return Var<T>::constant(Tensor<T>(shape, value));
}

}  // namespace detail

// 2x2 mean pooling, used to feed the half-resolution stage of the stacked model.
template <class T>
Tensor<T> avg_pool2x(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("avg_pool2x: bad input " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2) / 2, W = x.dim(3) / 2;
  Tensor<T> out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int z = 0; z < W; ++z)
          out.at(n, c, y, z) = T(0.25) * (x.at(n, c, 2 * y, 2 * z) + x.at(n, c, 2 * y + 1, 2 * z) +
                                          x.at(n, c, 2 * y, 2 * z + 1) + x.at(n, c, 2 * y + 1, 2 * z + 1));
  return out;
}

// FC(C + Z -> seed_channels * s * s) + BN + ReLU, reshaped to the seed map.
template <class T>
struct SeedMap {
  Linear<T> fc;
  BatchNorm<T> bn;
  int channels = 0, size = 0;

  SeedMap() = default;
  SeedMap(int code_dim, int noise_dim, int channels_, int size_, Rng& rng)
      : fc(code_dim + noise_dim, channels_ * size_ * size_, rng, false),
        bn(channels_ * size_ * size_),
        channels(channels_),
        size(size_) {}

  Var<T> operator()(const Var<T>& c_hat, const Var<T>& z, bool training) {
    if (c_hat.value().rank() != 2 || z.value().rank() != 2 || c_hat.dim(0) != z.dim(0) ||
        c_hat.dim(1) + z.dim(1) != fc.in_features()) {
      throw ShapeError("seed_map: code " + shape_str(c_hat.shape()) + " and noise " + shape_str(z.shape()) +
                       " do not match FC width " + std::to_string(fc.in_features()));
    }
    const int B = c_hat.dim(0);
    auto cat = ops::reshape(ops::concat_channels(ops::reshape(c_hat, {B, c_hat.dim(1), 1, 1}),
                                                 ops::reshape(z, {B, z.dim(1), 1, 1})),
                            {B, fc.in_features()});
    auto h = ops::relu(bn(fc(cat), training));
    return ops::reshape(h, {B, channels, size, size});
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    fc.collect(join_name(prefix, "fc"), out);
    bn.collect(join_name(prefix, "bn"), out);
  }
};

// Stride-2 conv + BN steps with no activation; level k (1-based) has spatial
// size W / 2^k. Levels are returned finest first.
template <class T>
struct BackgroundEncoder {
  std::vector<Conv2d<T>> convs;
  std::vector<BatchNorm<T>> bns;
  int input_size = 0;

  BackgroundEncoder() = default;
  BackgroundEncoder(int input_size_, int stem_channels, int levels, Rng& rng) : input_size(input_size_) {
    int in = 3, out = stem_channels;
    for (int k = 0; k < levels; ++k) {
      convs.emplace_back(in, out, 3, 2, 1, rng, false);
      bns.emplace_back(out);
      in = out;
      out *= 2;
    }
  }

  std::vector<Var<T>> operator()(const Var<T>& b, bool training) {
    if (b.value().rank() != 4 || b.dim(1) != 3 || b.dim(2) != input_size || b.dim(3) != input_size) {
      throw ShapeError("encode_background: expected [B,3," + std::to_string(input_size) + "," +
                       std::to_string(input_size) + "], got " + shape_str(b.shape()));
    }
    std::vector<Var<T>> levels;
    Var<T> h = b;
    for (std::size_t k = 0; k < convs.size(); ++k) {
      h = bns[k](convs[k](h), training);
      levels.push_back(h);
    }
    return levels;
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    for (std::size_t k = 0; k < convs.size(); ++k) {
      convs[k].collect(join_name(prefix, "conv" + std::to_string(k)), out);
      bns[k].collect(join_name(prefix, "bn" + std::to_string(k)), out);
    }
  }
};

template <class T>
struct BlockOutput {
  Var<T> fg_next;  // [B, C/2, 2h, 2w]
  Var<T> sw;       // [B, C, h, w]
};

// u = BN(conv(ReLU(BN(conv(fg))))) with 2C channels; the first C channels
// gate the background through a sigmoid, the rest carry the foreground.
// merged = fg_half + switch * bg is upsampled and reduced to C/2 channels.
template <class T>
struct SynthesisBlock {
  Conv2d<T> conv1, conv2, conv_up;
  BatchNorm<T> bn1, bn2, bn_up;
  int channels = 0;

  SynthesisBlock() = default;
  SynthesisBlock(int c, Rng& rng)
      : conv1(c, 2 * c, 3, 1, 1, rng, false),
        conv2(2 * c, 2 * c, 3, 1, 1, rng, false),
        conv_up(c, c / 2, 3, 1, 1, rng, false),
        bn1(2 * c),
        bn2(2 * c),
        bn_up(c / 2),
        channels(c) {
    if (c < 2 || c % 2) throw ConfigError("synthesis block needs an even channel count, got " + std::to_string(c));
  }

  BlockOutput<T> operator()(const Var<T>& fg, const Var<T>& bg, std::optional<double> override_value,
                            bool training) {
    if (fg.shape() != bg.shape()) {
      throw ShapeError("synthesis block: FG " + shape_str(fg.shape()) + " vs BG " + shape_str(bg.shape()));
    }
    if (fg.value().rank() != 4 || fg.dim(1) != channels) {
      throw ShapeError("synthesis block: expected " + std::to_string(channels) + " channels, got " +
                       shape_str(fg.shape()));
    }
    auto u = bn2(conv2(ops::relu(bn1(conv1(fg), training))), training);
    auto fg_half = ops::slice_channels(u, channels, channels);
    Var<T> sw = override_value ? detail::constant_like<T>(fg.shape(), static_cast<T>(*override_value))
                               : ops::sigmoid(ops::slice_channels(u, 0, channels));
    auto merged = ops::add(fg_half, ops::mul(sw, bg));
    auto next = ops::relu(bn_up(conv_up(ops::upsample_nearest2x(merged)), training));
    return {next, sw};
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    conv1.collect(join_name(prefix, "conv1"), out);
    bn1.collect(join_name(prefix, "bn1"), out);
    conv2.collect(join_name(prefix, "conv2"), out);
    bn2.collect(join_name(prefix, "bn2"), out);
    conv_up.collect(join_name(prefix, "conv_up"), out);
    bn_up.collect(join_name(prefix, "bn_up"), out);
  }
};

// Second stage of the stacked model: [feature | replicated code] is reduced
// by conv+BN+ReLU, passed through one synthesis block against a background
// level at the feature resolution, and projected to RGB + mask at 2x size.
template <class T>
struct StackStage2 {
  Conv2d<T> reduce;
  BatchNorm<T> reduce_bn;
  BackgroundEncoder<T> background;
  SynthesisBlock<T> block;
  Conv2d<T> head;
  int feature_channels = 0, feature_size = 0;

  StackStage2() = default;
  StackStage2(int feature_channels_, int feature_size_, int code_dim, int channels, Rng& rng)
      : reduce(feature_channels_ + code_dim, channels, 3, 1, 1, rng, false),
        reduce_bn(channels),
        background(2 * feature_size_, channels, 1, rng),
        block(channels, rng),
        head(channels / 2, 4, 3, 1, 1, rng, true),
        feature_channels(feature_channels_),
        feature_size(feature_size_) {}

  Var<T> fuse(const Var<T>& feature, const Var<T>& text_code, bool training) {
    if (feature.value().rank() != 4 || feature.dim(1) != feature_channels || feature.dim(2) != feature_size ||
        feature.dim(3) != feature_size) {
      throw ShapeError("stack_stage2: feature " + shape_str(feature.shape()) + " does not match [B," +
                       std::to_string(feature_channels) + "," + std::to_string(feature_size) + "," +
                       std::to_string(feature_size) + "]");
    }
    if (text_code.value().rank() != 2 || text_code.dim(0) != feature.dim(0) ||
        feature_channels + text_code.dim(1) != reduce.in_channels()) {
      throw ShapeError("stack_stage2: text code " + shape_str(text_code.shape()));
    }
    auto rep = ops::replicate_spatial(text_code, feature_size, feature_size);
    return ops::relu(reduce_bn(reduce(ops::concat_channels(feature, rep)), training));
  }

  GenOutput<T> operator()(const Var<T>& feature, const Var<T>& text_code, const Var<T>& b,
                          std::optional<double> override_value, bool training) {
    auto h = fuse(feature, text_code, training);
    auto levels = background(b, training);
    auto out = block(h, levels.front(), override_value, training);
    auto [image, mask] = detail::squash_head(head(out.fg_next));
    return {image, mask, {out.sw}, out.fg_next, {h, out.fg_next}};
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    reduce.collect(join_name(prefix, "reduce"), out);
    reduce_bn.collect(join_name(prefix, "reduce_bn"), out);
    background.collect(join_name(prefix, "background"), out);
    block.collect(join_name(prefix, "block"), out);
    head.collect(join_name(prefix, "head"), out);
  }
};

template <class T>
class Generator {
 public:
  Generator(const Hyperparams& hp, Rng& rng) : hp_(hp) {
    hp_.validate();
    ca_ = ConditioningAugmentation<T>(hp_.embed_dim, hp_.code_dim, rng);
    seed_ = SeedMap<T>(hp_.code_dim, hp_.noise_dim, hp_.seed_channels, hp_.seed_size(), rng);
    background_ = BackgroundEncoder<T>(hp_.stage1_size(), hp_.block_channels(hp_.blocks), hp_.blocks, rng);
    for (int k = 1; k <= hp_.blocks; ++k) blocks_.emplace_back(hp_.block_channels(k), rng);
    head_ = Conv2d<T>(hp_.final_channels(), 4, 3, 1, 1, rng, true);
    if (hp_.stacked) {
      stage2_.emplace(hp_.final_channels(), hp_.stage1_size(), hp_.code_dim, hp_.stage2_channels, rng);
    }
  }

  const Hyperparams& hyperparams() const { return hp_; }
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  ConditioningResult<T> condition(const Var<T>& phi, const Tensor<T>& epsilon) const { return ca_(phi, epsilon); }

  Var<T> seed_map(const Var<T>& c_hat, const Var<T>& z) { return seed_(c_hat, z, training_); }

  // Pyramid at the synthesis-chain resolution, finest level first.
  std::vector<Var<T>> encode_background(const Var<T>& b) { return background_(b, training_); }

  BlockOutput<T> synthesis_block_forward(int k, const Var<T>& fg, const Var<T>& bg, std::optional<double> override_value) {
    return blocks_.at(static_cast<std::size_t>(k))(fg, bg, override_value, training_);
  }

  GenOutput<T> generate(const Var<T>& b, const Var<T>& c_hat, const Var<T>& z,
                        const SwitchOverride& override = SwitchOverride::learned()) {
    override.validate();
    if (b.value().rank() != 4 || b.dim(2) != hp_.width || b.dim(3) != hp_.height) {
      throw ShapeError("generate: base image " + shape_str(b.shape()) + " does not match " +
                       std::to_string(hp_.width) + "x" + std::to_string(hp_.height));
    }
    if (b.dim(0) != c_hat.dim(0)) throw ShapeError("generate: batch size mismatch between base and code");
    const int total = hp_.switch_count();
    Var<T> stage1_base = hp_.stacked ? Var<T>::constant(avg_pool2x(b.value())) : b;
    GenOutput<T> out = stage1(stage1_base, c_hat, z, override, total);
    if (!hp_.stacked) return out;
    auto s2 = (*stage2_)(out.final_feature, c_hat, b, override.for_block(hp_.blocks, total), training_);
    s2.switches.insert(s2.switches.begin(), out.switches.begin(), out.switches.end());
    s2.fg_features.insert(s2.fg_features.begin(), out.fg_features.begin(), out.fg_features.end());
    return s2;
  }

  // Stage-2 forward on an explicit stage-1 feature (stacked models only).
  GenOutput<T> stack_stage2(const Var<T>& final_feature, const Var<T>& text_code, const Var<T>& b,
                            std::optional<double> override_value = std::nullopt) {
    if (!stage2_) throw ConfigError("stack_stage2: generator is not stacked");
    return (*stage2_)(final_feature, text_code, b, override_value, training_);
  }

  // Conditioning + generation from raw embeddings.
  std::pair<GenOutput<T>, ConditioningResult<T>> generate_from_embedding(
      const Var<T>& b, const Var<T>& phi, const Tensor<T>& epsilon, const Var<T>& z,
      const SwitchOverride& override = SwitchOverride::learned()) {
    auto cond = condition(phi, epsilon);
    return {generate(b, cond.c_hat, z, override), cond};
  }

  TensorList<T> tensors() const {
    TensorList<T> out;
    ca_.collect("generator/ca", out);
    seed_.collect("generator/seed", out);
    background_.collect("generator/background", out);
    for (std::size_t k = 0; k < blocks_.size(); ++k) blocks_[k].collect("generator/block" + std::to_string(k), out);
    head_.collect("generator/head", out);
    if (stage2_) stage2_->collect("generator/stage2", out);
    return out;
  }

  // Parameters updated by the optimizer (stage 1 excluded when frozen).
  TensorList<T> trainable() const {
    TensorList<T> out;
    for (auto& nt : tensors()) {
      if (!nt.trainable) continue;
      if (hp_.stacked && hp_.stage1_frozen && nt.name.rfind("generator/stage2", 0) != 0) continue;
      out.push_back(nt);
    }
    return out;
  }

  SynthesisBlock<T>& block(int k) { return blocks_.at(static_cast<std::size_t>(k)); }
  BackgroundEncoder<T>& background() { return background_; }
  SeedMap<T>& seed() { return seed_; }

 private:
  GenOutput<T> stage1(const Var<T>& b, const Var<T>& c_hat, const Var<T>& z, const SwitchOverride& override,
                      int total) {
    auto levels = background_(b, training_);
    Var<T> fg = seed_(c_hat, z, training_);
    GenOutput<T> out;
    for (int k = 0; k < hp_.blocks; ++k) {
      // Block k consumes the level with matching resolution: coarse to fine.
      const auto& bg = levels[static_cast<std::size_t>(hp_.blocks - 1 - k)];
      out.fg_features.push_back(fg);
      auto r = blocks_[static_cast<std::size_t>(k)](fg, bg, override.for_block(k, total), training_);
      out.switches.push_back(r.sw);
      fg = r.fg_next;
    }
    out.fg_features.push_back(fg);
    out.final_feature = fg;
    std::tie(out.image, out.mask) = detail::squash_head(head_(fg));
    return out;
  }

  Hyperparams hp_;
  bool training_ = true;
  ConditioningAugmentation<T> ca_;
  SeedMap<T> seed_;
  BackgroundEncoder<T> background_;
  std::vector<SynthesisBlock<T>> blocks_;
  Conv2d<T> head_;
  std::optional<StackStage2<T>> stage2_;
};

}  // namespace mcgan
