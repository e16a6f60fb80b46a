// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <opencv2/imgcodecs.hpp>

#include "mcgan/data.hpp"
#include "test_util.hpp"

namespace mcgan {
namespace {

using testing::TempDir;

Tensor<float> centered_square(int canvas, int side) {
  Tensor<float> m({1, 1, canvas, canvas});
  const int lo = (canvas - side) / 2;
  for (int y = lo; y < lo + side; ++y)
    for (int x = lo; x < lo + side; ++x) m.at(0, 0, y, x) = 1.0f;
  return m;
}

double area(const Tensor<float>& m, float threshold = 0.5f) {
  double a = 0;
  for (float v : m.values()) a += v >= threshold ? 1 : 0;
  return a;
}

TEST(BackgroundCrop, EmptyMaskAcceptsFirstDraw) {
  Rng rng(1), replay(1);
  Tensor<float> img({1, 3, 40, 30}, 0.25f);
  const auto crop = sample_background_crop(img, Tensor<float>({1, 1, 40, 30}), 16, rng);
  ASSERT_TRUE(crop);
  EXPECT_EQ(crop->x, replay.uniform_int(0, 30 - 16));
  EXPECT_EQ(crop->y, replay.uniform_int(0, 40 - 16));
  EXPECT_EQ(crop->coverage, 0.0);
  EXPECT_EQ(crop->image.shape(), (Shape{1, 3, 16, 16}));
}

TEST(BackgroundCrop, FullMaskHasNoCrop) {
  Rng rng(2);
  EXPECT_FALSE(sample_background_crop(Tensor<float>({1, 3, 32, 32}), Tensor<float>({1, 1, 32, 32}, 1.0f), 8, rng));
  EXPECT_THROW(sample_background_crop(Tensor<float>({1, 3, 32, 32}), Tensor<float>({1, 1, 32, 32}), 40, rng),
               std::invalid_argument);
}

TEST(BackgroundCrop, AcceptanceRegionMatchesExhaustiveEnumeration) {
  const int S = 256, size = 64, lo = 96, hi = 160;
  Tensor<float> img({1, 3, S, S});
  const auto mask = centered_square(S, 64);
  const double budget = 0.01 * size * size;
  auto overlap = [&](int a) { return std::max(0, std::min(a + size, hi) - std::max(a, lo)); };
  std::vector<char> valid(static_cast<std::size_t>(S - size + 1) * (S - size + 1));
  int valid_count = 0;
  for (int y = 0; y <= S - size; ++y)
    for (int x = 0; x <= S - size; ++x) {
      const bool ok = overlap(x) * overlap(y) <= budget;
      valid[static_cast<std::size_t>(y) * (S - size + 1) + x] = ok;
      valid_count += ok;
      ASSERT_EQ(mask_coverage(mask, x, y, size) <= 0.01, ok) << x << "," << y;
    }
  Rng rng(3);
  int accepted = 0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    const auto crop = sample_background_crop(img, mask, size, rng, 0.01, 1);
    if (!crop) continue;
    ++accepted;
    ASSERT_TRUE(valid[static_cast<std::size_t>(crop->y) * (S - size + 1) + crop->x]);
  }
  const double p = static_cast<double>(valid_count) / valid.size();
  const double sd = std::sqrt(p * (1 - p) / trials);
  EXPECT_NEAR(static_cast<double>(accepted) / trials, p, 4 * sd);
}

TEST(ToySample, MaskAreaMatchesAnalyticShapeArea) {
  ToyConfig cfg;
  cfg.canvas = 128;
  cfg.embed_dim = 16;
  Rng rng(4);
  for (int s = 0; s < 3; ++s)
    for (int z = 0; z < 3; ++z)
      for (int rep = 0; rep < 3; ++rep) {
        AttributeSpec a{static_cast<ShapeKind>(s), cfg.palette[rep], static_cast<SizeClass>(z)};
        const auto t = make_toy_sample(rng, cfg, a);
        const double expected = toy_shape_area(a.shape, a.size, cfg.canvas);
        EXPECT_NEAR(area(t.sample.mask), expected, 0.15 * expected) << s << "/" << z;
      }
}

TEST(ToySample, UnmaskedPixelsEqualBackground) {
  ToyConfig cfg;
  cfg.embed_dim = 16;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const auto t = make_toy_sample(rng, cfg);
    t.sample.validate();
    int differing_inside = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < cfg.canvas; ++y)
        for (int x = 0; x < cfg.canvas; ++x) {
          const bool inside = t.sample.mask.at(0, 0, y, x) > 0;
          const bool same = t.sample.image.at(0, c, y, x) == t.background.at(0, c, y, x);
          if (!inside) ASSERT_TRUE(same);
          differing_inside += inside && !same;
        }
    EXPECT_GT(differing_inside, 0);
  }
}

TEST(ToySample, SeedDeterminesSample) {
  ToyConfig cfg;
  cfg.embed_dim = 16;
  Rng a(6), b(6);
  const auto s1 = make_toy_sample(a, cfg);
  const auto s2 = make_toy_sample(b, cfg);
  EXPECT_EQ(s1.sample.image, s2.sample.image);
  EXPECT_EQ(s1.sample.mask, s2.sample.mask);
  EXPECT_EQ(s1.sample.embedding, s2.sample.embedding);
  EXPECT_EQ(s1.attrs, s2.attrs);
  EXPECT_EQ(s1.sample.embedding.values, toy_encode(s1.attrs, 16).values);
  for (float v : s1.background.values()) EXPECT_TRUE(v >= -1.0f && v <= 1.0f);
}

TEST(ToySample, DetectorFindsPaintedObject) {
  ToyConfig cfg;
  cfg.embed_dim = 16;
  Rng rng(7);
  double inter = 0, uni = 0;
  for (int i = 0; i < 20; ++i) {
    const auto t = make_toy_sample(rng, cfg);
    const auto det = detect_toy_object(t.sample.image, cfg.palette);
    for (std::size_t k = 0; k < det.size(); ++k) {
      const bool a = det[k] > 0.5f, b = t.sample.mask[k] > 0.5f;
      inter += a && b;
      uni += a || b;
    }
  }
  EXPECT_GT(inter / uni, 0.9);
}

TEST(Augment, FlagsOffIsIdentity) {
  Rng rng(8);
  const auto img = rng.uniform_tensor<float>({1, 3, 20, 20}, -1.0, 1.0);
  const auto mask = centered_square(20, 6);
  const auto [i2, m2] = augment(img, mask, rng, AugmentFlags{false, false, false});
  EXPECT_EQ(i2, img);
  EXPECT_EQ(m2, mask);
}

TEST(Augment, FlipIsAnInvolution) {
  Rng rng(9);
  const auto img = rng.uniform_tensor<float>({1, 3, 9, 14}, -1.0, 1.0);
  EXPECT_NE(flip_horizontal(img), img);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
  AugmentTransform tf;
  tf.flip = true;
  const auto [a, m] = apply_transform(img, Tensor<float>({1, 1, 9, 14}), tf);
  const auto [b, m2] = apply_transform(a, m, tf);
  EXPECT_EQ(b, img);
}

TEST(Augment, MaskAndContentScaleTogether) {
  // A white square on black: the image content and the mask must grow by the
  // same factor, close to zoom^2, under any drawn transform.
  const int S = 64;
  const auto mask = centered_square(S, 20);
  Tensor<float> img({1, 3, S, S}, -1.0f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (mask.at(0, 0, y, x) > 0) img.at(0, c, y, x) = 1.0f;
  Rng rng(10);
  for (int t = 0; t < 25; ++t) {
    const auto tf = AugmentTransform::draw(rng, AugmentFlags{}, S, S);
    ASSERT_LE(tf.zoom, kMaxZoom);
    ASSERT_LE(std::abs(tf.shift_x), kMaxJitter * S);
    const auto [i2, m2] = apply_transform(img, mask, tf);
    Tensor<float> content({1, 1, S, S});
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) content.at(0, 0, y, x) = i2.at(0, 0, y, x) >= 0.0f ? 1.0f : 0.0f;
    const double ratio_mask = area(m2) / area(mask);
    const double ratio_img = area(content) / area(mask);
    EXPECT_NEAR(ratio_mask, ratio_img, 0.12) << "zoom " << tf.zoom;
    EXPECT_NEAR(ratio_mask, tf.zoom * tf.zoom, 0.15) << "zoom " << tf.zoom;
    for (float v : m2.values()) ASSERT_TRUE(v == 0.0f || v == 1.0f);
  }
}

TEST(ImageIo, GrayscaleMaskThresholdsToBinary) {
  TempDir dir("io");
  cv::Mat m(6, 5, CV_8UC1, cv::Scalar(0));
  m.at<unsigned char>(2, 3) = 255;
  m.at<unsigned char>(4, 1) = 255;
  write_png(dir / "m.png", m);
  const auto t = mask_from_mat(read_mat(dir / "m.png", cv::IMREAD_GRAYSCALE));
  EXPECT_EQ(t.shape(), (Shape{1, 1, 6, 5}));
  EXPECT_EQ(area(t), 2);
  for (float v : t.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  EXPECT_EQ(t.at(0, 0, 2, 3), 1.0f);
}

TEST(ImageIo, NearestResizeKeepsCheckerboardBinary) {
  Tensor<float> m({1, 1, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) m.at(0, 0, y, x) = static_cast<float>((x + y) % 2);
  for (int size : {5, 13, 32}) {
    const auto r = resize_nearest(m, size, size);
    EXPECT_EQ(r.shape(), (Shape{1, 1, size, size}));
    for (float v : r.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  }
}

TEST(ImageIo, PngRoundTripAndErrors) {
  TempDir dir("io");
  Rng rng(11);
  const auto img = rng.uniform_tensor<float>({1, 3, 7, 9}, -1.0, 1.0);
  write_png(dir / "a.png", mat_from_image(img));
  const auto back = image_from_mat(read_mat(dir / "a.png", cv::IMREAD_COLOR));
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1.0f / 255.0f + 1e-6f);
  EXPECT_THROW(read_mat(dir / "missing.png", cv::IMREAD_COLOR), FormatError);
  std::ofstream(dir / "corrupt.png") << "not a png";
  EXPECT_THROW(read_mat(dir / "corrupt.png", cv::IMREAD_COLOR), FormatError);
}

class ToyDatasetDir : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_.canvas = 32;
    cfg_.embed_dim = 24;
    manifest_ = write_toy_dataset(dir_.path(), 5, 2, 12, cfg_);
  }
  TempDir dir_{"ds"};
  ToyConfig cfg_;
  DatasetManifest manifest_;
};

TEST_F(ToyDatasetDir, ManifestCardinalityAndDecoding) {
  const auto m = read_manifest_file(dir_ / "manifest.json");
  EXPECT_EQ(m.records.size(), 5u);
  ManifestDataset train(m, "train", 16, 24);
  ManifestDataset test(m, "test", 16, 24);
  EXPECT_EQ(train.size(), 3);
  EXPECT_EQ(test.size(), 2);
  Rng rng(13);
  for (int i = 0; i < train.size(); ++i) {
    const auto s = train.get(i, rng);
    s.validate();
    EXPECT_EQ(s.image.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_EQ(s.embedding.dim(), 24);
    EXPECT_EQ(s.caption_row, train.records()[static_cast<std::size_t>(i)].embedding_rows[0]);
    for (float v : s.image.values()) ASSERT_TRUE(v >= -1.0f && v <= 1.0f);
  }
  EXPECT_EQ(train.background(rng).shape(), (Shape{1, 3, 16, 16}));
  EXPECT_THROW(ManifestDataset(m, "train", 16, 1024), FormatError);
}

TEST_F(ToyDatasetDir, CaptionRowDrawnUniformly) {
  auto m = read_manifest_file(dir_ / "manifest.json");
  for (auto& r : m.records) r.embedding_rows = {0, 1, 2, 3};
  ManifestDataset ds(m, "", 32, 24);
  Rng rng(14);
  std::array<int, 4> counts{};
  for (int t = 0; t < 4000; ++t) ++counts[static_cast<std::size_t>(ds.get(0, rng).caption_row)];
  for (int c : counts) EXPECT_NEAR(c, 1000, 150);
}

TEST_F(ToyDatasetDir, CropsFromImagesWhenNoCleanBase) {
  auto m = read_manifest_file(dir_ / "manifest.json");
  for (auto& r : m.records) r.background.clear();
  ManifestDataset ds(m, "train", 8, 24);
  Rng rng(15);
  EXPECT_EQ(ds.background(rng).shape(), (Shape{1, 3, 8, 8}));
}

TEST_F(ToyDatasetDir, MissingAndCorruptFilesAreReported) {
  auto m = read_manifest_file(dir_ / "manifest.json");
  std::filesystem::remove(dir_ / m.records[0].mask);
  EXPECT_THROW(ManifestDataset(m, "", 32, 24), FormatError);
  m = read_manifest_file(dir_ / "manifest.json");
  m.records.erase(m.records.begin());
  std::ofstream(dir_ / m.records[0].image) << "garbage";
  ManifestDataset ds(m, "", 32, 24);
  Rng rng(16);
  EXPECT_THROW(ds.get(0, rng), FormatError);
  cv::imwrite((dir_ / m.records[1].mask).string(), cv::Mat(8, 8, CV_8UC1, cv::Scalar(0)));
  EXPECT_THROW(ds.get(1, rng), FormatError);
}

TEST_F(ToyDatasetDir, DuplicateIdsAndBadSplitsRejected) {
  auto m = read_manifest_file(dir_ / "manifest.json");
  auto dup = m;
  dup.records[1].image_id = dup.records[0].image_id;
  EXPECT_THROW(dup.validate(), FormatError);
  auto bad = m;
  bad.records[0].split = "val";
  EXPECT_THROW(bad.validate(), FormatError);
}

}  // namespace
}  // namespace mcgan
