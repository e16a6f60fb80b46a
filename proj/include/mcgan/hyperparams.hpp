// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "mcgan/tensor.hpp"

namespace mcgan {

// Architectural configuration shared by generator, discriminator and
// checkpoints. Defaults are the 128x128, four-block bird/flower setting.
struct Hyperparams {
  int width = 128;
  int height = 128;
  int blocks = 4;           // N synthesis blocks
  int noise_dim = 100;      // Z
  int seed_channels = 1024;
  int embed_dim = 1024;     // E
  int code_dim = 128;       // C
  int disc_channels = 64;   // width of the first discriminator conv
  double lambda1 = 2.0;
  double lambda2 = 15.0;
  bool with_mask = true;
  bool stacked = false;
  int stage2_channels = 64;
  bool stage1_frozen = false;

  // Resolution the synthesis-block chain runs at (half the output when stacked).
  int stage1_size() const { return stacked ? width / 2 : width; }
  int seed_size() const { return stage1_size() >> blocks; }
  // FG channels entering block k (1-based).
  int block_channels(int k) const { return seed_channels >> (k - 1); }
  int final_channels() const { return seed_channels >> blocks; }
  int disc_terminal_channels() const { return disc_channels << (blocks - 1); }
  int disc_code_size() const { return width >> blocks; }
  int switch_count() const { return blocks + (stacked ? 1 : 0); }

  std::vector<int> channel_plan() const {
    std::vector<int> plan;
    for (int k = 1; k <= blocks + 1; ++k) plan.push_back(seed_channels >> (k - 1));
    return plan;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("hyperparams: " + m); };
    if (width != height) fail("only square images are supported (W == H)");
    if (blocks < 1 || blocks > 8) fail("blocks must be in [1, 8]");
    if (width <= 0) fail("width must be positive");
    if (stacked && width % 2 != 0) fail("stacked width must be even");
    if (stage1_size() % (1 << blocks) != 0) fail("W must be divisible by 2^N");
    if (width % (1 << blocks) != 0) fail("discriminator needs W divisible by 2^N");
    if (seed_channels <= 0 || seed_channels % (1 << blocks) != 0) fail("seed_channels must be divisible by 2^N");
    if (noise_dim < 1 || embed_dim < 1 || code_dim < 1 || disc_channels < 1) fail("dimensions must be positive");
    if (lambda1 < 0 || lambda2 < 0) fail("lambda values must be non-negative");
    if (stacked && (stage2_channels < 2 || stage2_channels % 2 != 0)) fail("stage2_channels must be even");
  }

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Hyperparams, width, height, blocks, noise_dim, seed_channels,
                                                embed_dim, code_dim, disc_channels, lambda1, lambda2, with_mask,
                                                stacked, stage2_channels, stage1_frozen)

// Replacement for the learned sigmoid switch values.
struct SwitchOverride {
  enum class Mode { learned, constant, per_block };
  Mode mode = Mode::learned;
  double value = 0.0;
  std::vector<double> values;

  static SwitchOverride learned() { return {}; }
  static SwitchOverride constant(double v) {
    SwitchOverride o;
    o.mode = Mode::constant;
    o.value = v;
    o.validate();
    return o;
  }
  static SwitchOverride per_block(std::vector<double> vs) {
    SwitchOverride o;
    o.mode = Mode::per_block;
    o.values = std::move(vs);
    o.validate();
    return o;
  }

  void validate() const {
    auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (mode == Mode::constant && !in_range(value)) throw std::invalid_argument("switch constant outside [0, 1]");
    if (mode == Mode::per_block) {
      for (double v : values) {
        if (!in_range(v)) throw std::invalid_argument("switch constant outside [0, 1]");
      }
    }
  }

  // Constant for block index k (0-based), or nullopt for the learned switch.
  std::optional<double> for_block(int k, int block_count) const {
    switch (mode) {
      case Mode::learned:
        return std::nullopt;
      case Mode::constant:
        return value;
      case Mode::per_block:
        if (static_cast<int>(values.size()) != block_count) {
          throw std::invalid_argument("per_block override needs " + std::to_string(block_count) + " values");
        }
        return values[static_cast<std::size_t>(k)];
    }
    return std::nullopt;
  }

  std::string label() const {
    switch (mode) {
      case Mode::learned:
        return "learned";
      case Mode::constant:
        return "constant:" + nlohmann::json(value).dump();
      case Mode::per_block:
        return "per_block:" + nlohmann::json(values).dump();
    }
    return "?";
  }
};

inline void to_json(nlohmann::json& j, const SwitchOverride& o) {
  switch (o.mode) {
    case SwitchOverride::Mode::learned:
      j = {{"mode", "learned"}};
      break;
    case SwitchOverride::Mode::constant:
      j = {{"mode", "constant"}, {"value", o.value}};
      break;
    case SwitchOverride::Mode::per_block:
      j = {{"mode", "per_block"}, {"values", o.values}};
      break;
  }
}

inline void from_json(const nlohmann::json& j, SwitchOverride& o) {
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "learned") {
    o = SwitchOverride::learned();
  } else if (mode == "constant") {
    o = SwitchOverride::constant(j.at("value").get<double>());
  } else if (mode == "per_block") {
    o = SwitchOverride::per_block(j.at("values").get<std::vector<double>>());
  } else {
    throw std::invalid_argument("unknown switch override mode: " + mode);
  }
}

}  // namespace mcgan
