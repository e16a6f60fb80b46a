// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory:
//   manifest.json  architecture hyperparams, channel plan, variant flags, BN mode
//   tensors.json   index of {name, shape, offset} records (offset in bytes)
//   tensors.bin    concatenated little-endian float32 blobs
// Loading validates every name and shape against the receiving model.

#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mcgan/hyperparams.hpp"
#include "mcgan/nn.hpp"

namespace mcgan {

inline constexpr const char* kCheckpointFormat = "mcgan-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointManifest {
  Hyperparams hp;
  std::string bn_mode = "inference";
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const CheckpointManifest& manifest,
                     const TensorList<T>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = kCheckpointVersion;
  m["hyperparams"] = manifest.hp;
  m["channel_plan"] = manifest.hp.channel_plan();
  m["variant"] = {{"with_mask", manifest.hp.with_mask}, {"stacked", manifest.hp.stacked}};
  m["bn_mode"] = manifest.bn_mode;
  m["extra"] = manifest.extra;
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");

  nlohmann::json index = nlohmann::json::array();
  std::ofstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw FormatError("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  std::vector<float> buf;
  for (const auto& nt : tensors) {
    const auto& v = nt.var.value();
    buf.assign(v.values().begin(), v.values().end());
    blob.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    index.push_back({{"name", nt.name}, {"shape", v.shape()}, {"offset", offset}});
    offset += buf.size() * sizeof(float);
  }
  if (!blob) throw FormatError("failed writing tensors.bin");
  detail::write_text(dir / "tensors.json", index.dump(1) + "\n");
}

inline CheckpointManifest read_manifest(const std::filesystem::path& dir) {
  const auto m = detail::read_json(dir / "manifest.json");
  if (m.value("format", "") != kCheckpointFormat) throw FormatError("not an mcgan checkpoint: " + dir.string());
  if (m.value("version", 0) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  CheckpointManifest out;
  out.hp = m.at("hyperparams").get<Hyperparams>();
  out.hp.validate();
  if (m.at("channel_plan").get<std::vector<int>>() != out.hp.channel_plan()) {
    throw FormatError("checkpoint channel plan disagrees with its hyperparams");
  }
  out.bn_mode = m.value("bn_mode", "inference");
  out.extra = m.value("extra", nlohmann::json::object());
  return out;
}

// Fill `into` from the checkpoint. Every requested name must exist with the
// same shape; entries in the file that are not requested are ignored.
template <class T>
void load_tensors(const std::filesystem::path& dir, const TensorList<T>& into) {
  const auto index = detail::read_json(dir / "tensors.json");
  struct Entry {
    Shape shape;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> entries;
  for (const auto& e : index) {
    entries[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>()};
  }
  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw FormatError("cannot open " + (dir / "tensors.bin").string());
  const auto file_size = std::filesystem::file_size(dir / "tensors.bin");
  std::vector<float> buf;
  for (auto nt : into) {
    auto it = entries.find(nt.name);
    if (it == entries.end()) throw FormatError("checkpoint is missing tensor " + nt.name);
    if (it->second.shape != nt.var.shape()) {
      throw FormatError("checkpoint tensor " + nt.name + " has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(nt.var.shape()));
    }
    const std::size_t n = numel(it->second.shape);
    if (it->second.offset + n * sizeof(float) > file_size) throw FormatError("tensors.bin truncated at " + nt.name);
    buf.resize(n);
    blob.seekg(static_cast<std::streamoff>(it->second.offset));
    blob.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!blob) throw FormatError("read failed for " + nt.name);
    auto& dst = nt.var.mutable_value();
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(buf[i]);
  }
}

}  // namespace mcgan
