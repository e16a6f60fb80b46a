// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "mcgan/embedding.hpp"
#include "test_util.hpp"

namespace mcgan {
namespace {

using testing::TempDir;

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_raw_table(const std::filesystem::path& p, int count, int dim, std::size_t payload_bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  const std::string header = nlohmann::json{{"count", count}, {"dim", dim}}.dump();
  const auto len = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> payload(payload_bytes / sizeof(float));
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(i) * 0.5f;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload_bytes));
}

TEST(EmbeddingFile, SmallestWellFormedTable) {
  TempDir dir("emb");
  write_raw_table(dir / "t.bin", 2, 4, 32);
  const auto t = load_embeddings(dir / "t.bin");
  EXPECT_EQ(t.count, 2);
  EXPECT_EQ(t.dim, 4);
  ASSERT_EQ(t.rows.size(), 8u);
  EXPECT_FLOAT_EQ(t.row(1)[3], 3.5f);
}

TEST(EmbeddingFile, TruncatedPayloadIsRejected) {
  TempDir dir("emb");
  write_raw_table(dir / "t.bin", 2, 4, 16);
  EXPECT_THROW(load_embeddings(dir / "t.bin"), FormatError);
}

TEST(EmbeddingFile, BadMagicAndDimensionMismatch) {
  TempDir dir("emb");
  std::ofstream(dir / "junk.bin") << "not an embedding table";
  EXPECT_THROW(load_embeddings(dir / "junk.bin"), FormatError);
  write_raw_table(dir / "t.bin", 2, 4, 32);
  EXPECT_THROW(load_embeddings(dir / "t.bin", 1024), FormatError);
  EXPECT_THROW(load_embeddings(dir / "missing.bin"), FormatError);
}

TEST(EmbeddingFile, SaveOfLoadIsByteIdentical) {
  TempDir dir("emb");
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    EmbeddingTable t;
    t.count = rng.uniform_int(0, 6);
    t.dim = rng.uniform_int(1, 40);
    for (int i = 0; i < t.count * t.dim; ++i) t.rows.push_back(static_cast<float>(rng.normal()));
    const auto a = dir / ("a" + std::to_string(trial) + ".bin");
    const auto b = dir / ("b" + std::to_string(trial) + ".bin");
    save_embeddings(t, a);
    save_embeddings(load_embeddings(a), b);
    EXPECT_EQ(read_bytes(a), read_bytes(b));
    EXPECT_EQ(load_embeddings(a).rows, t.rows);
  }
}

TEST(EmbeddingFile, IndexRejectsRowsOutsideTable) {
  TempDir dir("emb");
  EmbeddingTable t;
  t.count = 2;
  t.dim = 1;
  t.rows = {1.0f, 2.0f};
  t.index["img"] = {0, 1};
  save_embedding_index(t, dir / "idx.json");
  EmbeddingTable u = t;
  u.index.clear();
  load_embedding_index(u, dir / "idx.json");
  EXPECT_EQ(u.index.at("img"), (std::vector<int>{0, 1}));
  std::ofstream(dir / "bad.json") << R"({"img": [5]})";
  EXPECT_THROW(load_embedding_index(u, dir / "bad.json"), FormatError);
}

ConditioningAugmentation<double> small_ca(int E, int C, std::uint64_t seed) {
  Rng rng(seed);
  ConditioningAugmentation<double> ca(E, C, rng);
  // Non-zero biases so the bias path is exercised.
  for (auto& v : ca.fc.bias->mutable_value().values()) v = rng.normal(0.0, 0.1);
  for (auto& v : ca.fc.weight.mutable_value().values()) v = rng.normal(0.0, 0.3);
  return ca;
}

TEST(ConditionAugment, ZeroNoiseGivesMu) {
  auto ca = small_ca(6, 3, 1);
  Rng rng(2);
  auto phi = Var<double>::constant(rng.normal_tensor<double>({2, 6}));
  auto r = ca(phi, Tensor<double>({2, 3}));
  EXPECT_EQ(r.c_hat.value(), r.mu.value());
}

TEST(ConditionAugment, ZeroWeightsGiveBiasOnlyMoments) {
  auto ca = small_ca(5, 2, 3);
  ca.fc.weight.mutable_value().fill(0.0);
  const auto& bias = ca.fc.bias->value();
  Rng rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    auto r = ca(Var<double>::constant(rng.normal_tensor<double>({1, 5})), Tensor<double>({1, 2}));
    for (int i = 0; i < 2; ++i) {
      EXPECT_DOUBLE_EQ(r.mu.value()[i], bias[i]);
      EXPECT_DOUBLE_EQ(r.sigma.value()[i], std::exp(0.5 * bias[2 + i]));
    }
  }
}

TEST(ConditionAugment, UnitVectorsMatchHandArithmetic) {
  const int E = 7, C = 4;
  auto ca = small_ca(E, C, 5);
  Tensor<double> phi({1, E});
  phi[0] = 1.0;
  Tensor<double> eps({1, C});
  eps[0] = 1.0;
  auto r = ca(Var<double>::constant(phi), eps);
  const auto& W = ca.fc.weight.value();  // [2C, E]
  const auto& b = ca.fc.bias->value();
  for (int i = 0; i < C; ++i) {
    // Column 0 of W picks out the response to e1.
    const double mu = W[static_cast<std::size_t>(i) * E] + b[i];
    const double lv = W[static_cast<std::size_t>(C + i) * E] + b[C + i];
    const double expected = mu + (i == 0 ? std::exp(0.5 * lv) : 0.0);
    EXPECT_NEAR(r.c_hat.value()[i], expected, 1e-12) << "component " << i;
  }
}

TEST(ConditionAugment, RejectsWrongEmbeddingWidth) {
  auto ca = small_ca(6, 3, 1);
  EXPECT_THROW(ca(Var<double>::constant(Tensor<double>({1, 5})), Tensor<double>({1, 3})), ShapeError);
  EXPECT_THROW(ca(Var<double>::constant(Tensor<double>({1, 6})), Tensor<double>({1, 2})), ShapeError);
}

TEST(KlDivergence, ClosedFormExamples) {
  const std::vector<double> z{0, 0}, one{1, 1}, e1{1, 0};
  EXPECT_DOUBLE_EQ(kl_divergence(z, one), 0.0);
  EXPECT_DOUBLE_EQ(kl_divergence(e1, one), 0.5);
  EXPECT_THROW(kl_divergence(e1, std::vector<double>{1, 0}), std::invalid_argument);
  EXPECT_THROW(kl_divergence(e1, std::vector<double>{1, -2}), std::invalid_argument);
}

TEST(KlDivergence, MatchesMonteCarloEstimate) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> mu(8), sigma(8);
    for (int i = 0; i < 8; ++i) {
      mu[i] = rng.uniform(-1.0, 1.0);
      sigma[i] = rng.uniform(0.4, 1.6);
    }
    double acc = 0;
    const int n = 100000;
    for (int s = 0; s < n; ++s) {
      double log_ratio = 0;
      for (int i = 0; i < 8; ++i) {
        const double u = rng.normal();
        const double x = mu[i] + sigma[i] * u;
        // log q(x) - log p(x), constants cancel
        log_ratio += -0.5 * u * u - std::log(sigma[i]) + 0.5 * x * x;
      }
      acc += log_ratio;
    }
    const double mc = acc / n;
    const double closed = kl_divergence(mu, sigma);
    EXPECT_NEAR(closed, mc, 0.02 * closed) << "trial " << trial;
  }
}

TEST(KlDivergence, OpMatchesScalarFormula) {
  Rng rng(9);
  auto mu = rng.normal_tensor<double>({3, 5});
  auto sigma = rng.uniform_tensor<double>({3, 5}, 0.3, 2.0);
  const double op = ops::kl_normal(Var<double>::constant(mu), Var<double>::constant(sigma)).value()[0];
  double mean = 0;
  for (int b = 0; b < 3; ++b) {
    mean += kl_divergence(std::span<const double>(mu.storage()).subspan(b * 5, 5),
                          std::span<const double>(sigma.storage()).subspan(b * 5, 5));
  }
  EXPECT_NEAR(op, mean / 3, 1e-12);
}

TEST(ToyEncode, DeterministicAndColourSensitive) {
  AttributeSpec a{ShapeKind::triangle, {0.2f, 0.4f, 0.6f}, SizeClass::large};
  EXPECT_EQ(toy_encode(a).values, toy_encode(a).values);
  EXPECT_EQ(toy_encode(a).dim(), 1024);
  AttributeSpec b = a;
  b.color = {0.2f, 0.4f, 0.7f};
  EXPECT_NE(toy_encode(a).values, toy_encode(b).values);
}

TEST(ToyEncode, AttributeGridIsPairwiseDistinct) {
  const std::array<std::array<float, 3>, 3> colours{{{0.85f, 0.15f, 0.15f}, {0.15f, 0.75f, 0.2f}, {0.15f, 0.3f, 0.9f}}};
  std::vector<std::vector<float>> seen;
  for (int s = 0; s < 3; ++s)
    for (const auto& c : colours)
      for (int z = 0; z < 3; ++z) {
        seen.push_back(toy_encode({static_cast<ShapeKind>(s), c, static_cast<SizeClass>(z)}).values);
      }
  ASSERT_EQ(seen.size(), 27u);
  for (std::size_t i = 0; i < seen.size(); ++i) {
    for (std::size_t j = i + 1; j < seen.size(); ++j) {
      double d = 0;
      for (std::size_t k = 0; k < seen[i].size(); ++k) d = std::max(d, double(std::abs(seen[i][k] - seen[j][k])));
      EXPECT_GT(d, 1e-3) << i << " vs " << j;
    }
  }
}

TEST(ToyEncode, JsonRoundTripAndValidation) {
  AttributeSpec a{ShapeKind::rectangle, {0.1f, 0.2f, 0.3f}, SizeClass::small};
  EXPECT_EQ(nlohmann::json(a).get<AttributeSpec>(), a);
  auto j = nlohmann::json(a);
  j["shape"] = "hexagon";
  EXPECT_ANY_THROW(j.get<AttributeSpec>());
  a.color[1] = 1.5f;
  EXPECT_THROW(toy_encode(a), std::invalid_argument);
}

TEST(Interpolate, EndpointsAndMidpoint) {
  TextEmbedding p{{2.0f, 0.0f}, "p"}, q{{0.0f, 2.0f}, "q"};
  EXPECT_EQ(interpolate(p, q, 0.0).values, p.values);
  EXPECT_EQ(interpolate(p, q, 1.0).values, q.values);
  EXPECT_EQ(interpolate(p, q, 0.5).values, (std::vector<float>{1.0f, 1.0f}));
  EXPECT_THROW(interpolate(p, q, 1.5), std::invalid_argument);
  EXPECT_THROW(interpolate(p, q, -0.1), std::invalid_argument);
  EXPECT_THROW(interpolate(p, TextEmbedding{{1.0f}, "r"}, 0.5), ShapeError);
}

}  // namespace
}  // namespace mcgan
