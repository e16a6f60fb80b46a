// SPDX-License-Identifier: Apache-2.0
//
// Text embeddings: binary table I/O, the deterministic toy attribute encoder,
// conditioning augmentation and its KL regularizer.

#pragma once

#include <json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mcgan/nn.hpp"

namespace mcgan {

struct TextEmbedding {
  std::vector<float> values;
  std::string source_id;

  int dim() const { return static_cast<int>(values.size()); }
  friend bool operator==(const TextEmbedding&, const TextEmbedding&) = default;
};

struct EmbeddingTable {
  int dim = 0;
  int count = 0;
  std::vector<float> rows;  // count x dim, row-major
  std::map<std::string, std::vector<int>> index;

  std::span<const float> row(int i) const {
    if (i < 0 || i >= count) throw std::out_of_range("embedding row " + std::to_string(i) + " out of range");
    return std::span<const float>(rows).subspan(static_cast<std::size_t>(i) * dim, dim);
  }

  TextEmbedding embedding(int i) const {
    auto r = row(i);
    return {std::vector<float>(r.begin(), r.end()), "row:" + std::to_string(i)};
  }

  void validate() const {
    if (dim <= 0) throw FormatError("embedding table: dim must be positive");
    if (rows.size() != static_cast<std::size_t>(count) * dim) throw FormatError("embedding table: size mismatch");
    for (const auto& [id, list] : index) {
      for (int r : list) {
        if (r < 0 || r >= count) throw FormatError("embedding index for '" + id + "' points outside the table");
      }
    }
  }
};

inline constexpr std::array<char, 16> kEmbeddingMagic = {'M', 'C', 'G', 'A', 'N', '-', 'E', 'M',
                                                         'B', '\0', '\0', '\0', '\0', '\0', '\0', '\0'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

// Binary layout: 16-byte magic, u32 header length, UTF-8 JSON header
// {"count":n,"dim":E}, then count*dim little-endian float32 values.
inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  table.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string header = nlohmann::json{{"count", table.count}, {"dim", table.dim}}.dump();
  out.write(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  const auto len = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(table.rows.data()),
            static_cast<std::streamsize>(table.rows.size() * sizeof(float)));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline void save_embedding_index(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << nlohmann::json(table.index).dump(2) << '\n';
}

// Reads a table; expected_dim > 0 additionally enforces the model's E.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path, int expected_dim = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open embedding file " + path.string());
  std::array<char, 16> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kEmbeddingMagic) throw FormatError("malformed header: bad magic in " + path.string());
  const std::uint32_t len = detail::read_u32(in);
  if (!in || len == 0 || len > (1u << 20)) throw FormatError("malformed header: bad header length");
  std::string header(len, '\0');
  in.read(header.data(), len);
  if (!in) throw FormatError("malformed header: truncated header");
  EmbeddingTable table;
  try {
    const auto j = nlohmann::json::parse(header);
    table.count = j.at("count").get<int>();
    table.dim = j.at("dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (table.count < 0 || table.dim <= 0) throw FormatError("malformed header: invalid count/dim");
  if (expected_dim > 0 && table.dim != expected_dim) {
    throw FormatError("dimension mismatch: file has " + std::to_string(table.dim) + ", config expects " +
                      std::to_string(expected_dim));
  }
  table.rows.resize(static_cast<std::size_t>(table.count) * table.dim);
  const auto bytes = static_cast<std::streamsize>(table.rows.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(table.rows.data()), bytes);
  if (in.gcount() != bytes) {
    throw FormatError("truncated payload: expected " + std::to_string(bytes) + " bytes, got " +
                      std::to_string(in.gcount()));
  }
  return table;
}

inline void load_embedding_index(EmbeddingTable& table, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open embedding index " + path.string());
  try {
    table.index = nlohmann::json::parse(in).get<std::map<std::string, std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad embedding index: ") + e.what());
  }
  table.validate();
}

// (1 - alpha) * a + alpha * b.
inline TextEmbedding interpolate(const TextEmbedding& a, const TextEmbedding& b, double alpha) {
  if (a.dim() != b.dim()) throw ShapeError("interpolate: dimension mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("interpolate: alpha must lie in [0, 1]");
  if (alpha == 0.0) return a;
  if (alpha == 1.0) return b;
  TextEmbedding out;
  out.values.resize(a.values.size());
  const float w = static_cast<float>(alpha);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (1.0f - w) * a.values[i] + w * b.values[i];
  out.source_id = "interp(" + a.source_id + "," + b.source_id + "," + std::to_string(alpha) + ")";
  return out;
}

// ---- toy attributes --------------------------------------------------------

enum class ShapeKind { ellipse, rectangle, triangle };
enum class SizeClass { small, medium, large };

NLOHMANN_JSON_SERIALIZE_ENUM(ShapeKind, {{ShapeKind::ellipse, "ellipse"},
                                         {ShapeKind::rectangle, "rectangle"},
                                         {ShapeKind::triangle, "triangle"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SizeClass,
                             {{SizeClass::small, "small"}, {SizeClass::medium, "medium"}, {SizeClass::large, "large"}})

struct AttributeSpec {
  ShapeKind shape = ShapeKind::ellipse;
  std::array<float, 3> color{1.0f, 0.0f, 0.0f};
  SizeClass size = SizeClass::medium;

  void validate() const {
    for (float c : color) {
      if (!(c >= 0.0f && c <= 1.0f)) throw std::invalid_argument("attribute color outside [0, 1]");
    }
    if (static_cast<int>(shape) < 0 || static_cast<int>(shape) > 2) throw std::invalid_argument("bad shape kind");
    if (static_cast<int>(size) < 0 || static_cast<int>(size) > 2) throw std::invalid_argument("bad size class");
  }

  friend bool operator==(const AttributeSpec&, const AttributeSpec&) = default;
};

inline void to_json(nlohmann::json& j, const AttributeSpec& a) {
  j = nlohmann::json{{"shape", a.shape}, {"color", a.color}, {"size", a.size}};
}

inline void from_json(const nlohmann::json& j, AttributeSpec& a) {
  a.shape = j.at("shape").get<ShapeKind>();
  a.color = j.at("color").get<std::array<float, 3>>();
  a.size = j.at("size").get<SizeClass>();
  const auto s = j.at("shape").get<std::string>();
  if (s != "ellipse" && s != "rectangle" && s != "triangle") throw std::invalid_argument("unknown shape: " + s);
  const auto z = j.at("size").get<std::string>();
  if (z != "small" && z != "medium" && z != "large") throw std::invalid_argument("unknown size: " + z);
  a.validate();
}

inline constexpr int kToyFeatureDim = 9;
inline constexpr std::uint64_t kToyProjectionSeed = 7;

// E x 9 projection matrix, N(0, 1/9) entries from a generator seeded with 7.
inline const std::vector<float>& toy_projection(int dim) {
  static thread_local std::map<int, std::vector<float>> cache;
  auto it = cache.find(dim);
  if (it != cache.end()) return it->second;
  Rng rng(kToyProjectionSeed);
  std::vector<float> m(static_cast<std::size_t>(dim) * kToyFeatureDim);
  for (auto& v : m) v = static_cast<float>(rng.normal(0.0, 1.0 / 3.0));
  return cache.emplace(dim, std::move(m)).first->second;
}

inline std::array<float, kToyFeatureDim> toy_features(const AttributeSpec& attrs) {
  std::array<float, kToyFeatureDim> f{};
  f[static_cast<int>(attrs.shape)] = 1.0f;
  f[3] = attrs.color[0];
  f[4] = attrs.color[1];
  f[5] = attrs.color[2];
  f[6 + static_cast<int>(attrs.size)] = 1.0f;
  return f;
}

inline TextEmbedding toy_encode(const AttributeSpec& attrs, int dim = 1024) {
  attrs.validate();
  const auto f = toy_features(attrs);
  const auto& m = toy_projection(dim);
  TextEmbedding e;
  e.values.assign(dim, 0.0f);
  for (int r = 0; r < dim; ++r) {
    float s = 0.0f;
    for (int c = 0; c < kToyFeatureDim; ++c) s += m[static_cast<std::size_t>(r) * kToyFeatureDim + c] * f[c];
    e.values[r] = s;
  }
  e.source_id = "toy:" + nlohmann::json(attrs).dump();
  return e;
}

// ---- conditioning augmentation ----------------------------------------------

inline double kl_divergence(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("kl_divergence: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw std::invalid_argument("kl_divergence: sigma must be positive");
    s += mu[i] * mu[i] + sigma[i] * sigma[i] - 2.0 * std::log(sigma[i]) - 1.0;
  }
  return 0.5 * s;
}

template <class T>
struct ConditioningResult {
  Var<T> mu;     // [B, C]
  Var<T> sigma;  // [B, C], positive
  Var<T> c_hat;  // [B, C]
};

// One affine map E -> 2C emitting [mu | logvar]; sigma = exp(logvar / 2).
template <class T>
struct ConditioningAugmentation {
  Linear<T> fc;
  int code_dim = 0;

  ConditioningAugmentation() = default;
  ConditioningAugmentation(int embed_dim, int code_dim_, Rng& rng) : fc(embed_dim, 2 * code_dim_, rng), code_dim(code_dim_) {}

  int embed_dim() const { return fc.in_features(); }

  // phi [B, E]; epsilon [B, C].
  ConditioningResult<T> operator()(const Var<T>& phi, const Tensor<T>& epsilon) const {
    if (phi.value().rank() != 2 || phi.dim(1) != embed_dim()) {
      throw ShapeError("condition_augment: embedding " + shape_str(phi.shape()) + " vs weight width " +
                       std::to_string(embed_dim()));
    }
    if (epsilon.shape() != Shape({phi.dim(0), code_dim})) {
      throw ShapeError("condition_augment: epsilon shape " + shape_str(epsilon.shape()));
    }
    const int B = phi.dim(0);
    auto out = ops::reshape(fc(phi), {B, 2 * code_dim, 1, 1});
    auto mu = ops::reshape(ops::slice_channels(out, 0, code_dim), {B, code_dim});
    auto logvar = ops::reshape(ops::slice_channels(out, code_dim, code_dim), {B, code_dim});
    auto sigma = ops::exp(ops::scale(logvar, T(0.5)));
    auto c_hat = ops::add(mu, ops::mul(sigma, Var<T>::constant(epsilon)));
    return {mu, sigma, c_hat};
  }

  void collect(const std::string& prefix, TensorList<T>& out) const { fc.collect(join_name(prefix, "fc"), out); }
};

// Stack embeddings into a [B, E] tensor.
template <class T>
Tensor<T> embedding_batch(const std::vector<TextEmbedding>& items) {
  if (items.empty()) throw ShapeError("embedding_batch: empty");
  const int E = items.front().dim();
  Tensor<T> t({static_cast<int>(items.size()), E});
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b].dim() != E) throw ShapeError("embedding_batch: inconsistent dimensions");
    for (int i = 0; i < E; ++i) t[b * E + i] = static_cast<T>(items[b].values[i]);
  }
  return t;
}

}  // namespace mcgan
