// SPDX-License-Identifier: Apache-2.0
//
// Scene samples, background-crop sampling, augmentation, the procedural toy
// dataset and JSON-manifest datasets backed by PNG files.
//
// Single samples are carried as batch-of-one tensors: images [1, 3, H, W] in
// [-1, 1] and masks [1, 1, H, W] in {0, 1}.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mcgan/embedding.hpp"
#include "mcgan/image_io.hpp"
#include "mcgan/random.hpp"

namespace mcgan {

namespace fs = std::filesystem;

struct SceneSample {
  Tensor<float> image;  // [1, 3, H, W]
  Tensor<float> mask;   // [1, 1, H, W]
  TextEmbedding embedding;
  std::string image_id;
  int caption_row = -1;
  int class_id = -1;

  void validate() const {
    if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
      throw ShapeError("scene sample image must be [1,3,H,W], got " + shape_str(image.shape()));
    }
    if (mask.shape() != Shape{1, 1, image.dim(2), image.dim(3)}) {
      throw ShapeError("scene sample mask " + shape_str(mask.shape()) + " does not match image " +
                       shape_str(image.shape()));
    }
    for (float v : mask.values()) {
      if (v != 0.0f && v != 1.0f) throw FormatError("scene sample mask is not binary");
    }
  }
};

// ---- background crops --------------------------------------------------------

struct BackgroundCrop {
  Tensor<float> image;  // [1, 3, size, size]
  int x = 0;
  int y = 0;
  double coverage = 0.0;
};

inline double mask_coverage(const Tensor<float>& mask, int x0, int y0, int size) {
  double s = 0.0;
  for (int y = y0; y < y0 + size; ++y) {
    for (int x = x0; x < x0 + size; ++x) s += mask.at(0, 0, y, x);
  }
  return s / (static_cast<double>(size) * size);
}

inline Tensor<float> crop_image(const Tensor<float>& img, int x0, int y0, int w, int h) {
  const int C = img.dim(1);
  Tensor<float> out({1, C, h, w});
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(0, c, y, x) = img.at(0, c, y0 + y, x0 + x);
    }
  }
  return out;
}

// Rejection-samples a size x size window uniformly over all offsets and
// accepts the first whose object coverage is within max_overlap.
inline std::optional<BackgroundCrop> sample_background_crop(const Tensor<float>& image, const Tensor<float>& mask,
                                                            int size, Rng& rng, double max_overlap = 0.01,
                                                            int max_tries = 50) {
  const int H = image.dim(2), W = image.dim(3);
  if (size <= 0 || size > H || size > W) {
    throw std::invalid_argument("crop size " + std::to_string(size) + " exceeds image " + std::to_string(W) + "x" +
                                std::to_string(H));
  }
  if (mask.dim(2) != H || mask.dim(3) != W) throw ShapeError("sample_background_crop: mask/image size mismatch");
  for (int t = 0; t < max_tries; ++t) {
    const int x = rng.uniform_int(0, W - size);
    const int y = rng.uniform_int(0, H - size);
    const double cov = mask_coverage(mask, x, y, size);
    if (cov <= max_overlap) {
      return BackgroundCrop{crop_image(image, x, y, size, size), x, y, cov};
    }
  }
  return std::nullopt;
}

// ---- augmentation ------------------------------------------------------------

struct AugmentFlags {
  bool flip = true;
  bool zoom = true;
  bool crop = true;

  friend bool operator==(const AugmentFlags&, const AugmentFlags&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentFlags, flip, zoom, crop)

inline constexpr double kMaxZoom = 1.15;
inline constexpr double kMaxJitter = 0.05;

// One geometric transform drawn once and applied to both image and mask.
struct AugmentTransform {
  bool flip = false;
  double zoom = 1.0;
  double shift_x = 0.0;  // in pixels of the output grid
  double shift_y = 0.0;

  bool resamples() const { return zoom != 1.0 || shift_x != 0.0 || shift_y != 0.0; }

  static AugmentTransform draw(Rng& rng, const AugmentFlags& flags, int width, int height) {
    AugmentTransform t;
    if (flags.flip) t.flip = rng.bernoulli(0.5);
    if (flags.zoom) t.zoom = rng.uniform(1.0, kMaxZoom);
    if (flags.crop) {
      t.shift_x = rng.uniform(-kMaxJitter, kMaxJitter) * width;
      t.shift_y = rng.uniform(-kMaxJitter, kMaxJitter) * height;
    }
    return t;
  }
};

inline Tensor<float> flip_horizontal(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  const int N = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) out.at(n, c, y, x) = t.at(n, c, y, W - 1 - x);
      }
    }
  }
  return out;
}

// Zoom about the centre and translate; bilinear for images, nearest for
// masks. Source coordinates are clamped to the border.
inline Tensor<float> warp_zoom_shift(const Tensor<float>& t, double zoom, double sx, double sy, bool nearest) {
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Tensor<float> out(t.shape());
  const double cx = (W - 1) * 0.5, cy = (H - 1) * 0.5;
  for (int y = 0; y < H; ++y) {
    const double fy = std::clamp(cy + (y - cy) / zoom + sy, 0.0, H - 1.0);
    for (int x = 0; x < W; ++x) {
      const double fx = std::clamp(cx + (x - cx) / zoom + sx, 0.0, W - 1.0);
      if (nearest) {
        const int ix = static_cast<int>(std::lround(fx)), iy = static_cast<int>(std::lround(fy));
        for (int c = 0; c < C; ++c) out.at(0, c, y, x) = t.at(0, c, iy, ix);
        continue;
      }
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const float ax = static_cast<float>(fx - x0), ay = static_cast<float>(fy - y0);
      for (int c = 0; c < C; ++c) {
        const float top = t.at(0, c, y0, x0) * (1 - ax) + t.at(0, c, y0, x1) * ax;
        const float bot = t.at(0, c, y1, x0) * (1 - ax) + t.at(0, c, y1, x1) * ax;
        out.at(0, c, y, x) = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

inline std::pair<Tensor<float>, Tensor<float>> apply_transform(const Tensor<float>& image, const Tensor<float>& mask,
                                                               const AugmentTransform& tf) {
  Tensor<float> img = image, msk = mask;
  if (tf.flip) {
    img = flip_horizontal(img);
    msk = flip_horizontal(msk);
  }
  if (tf.resamples()) {
    img = warp_zoom_shift(img, tf.zoom, tf.shift_x, tf.shift_y, false);
    msk = warp_zoom_shift(msk, tf.zoom, tf.shift_x, tf.shift_y, true);
  }
  return {std::move(img), std::move(msk)};
}

inline std::pair<Tensor<float>, Tensor<float>> augment(const Tensor<float>& image, const Tensor<float>& mask, Rng& rng,
                                                       const AugmentFlags& flags) {
  if (image.dim(2) != mask.dim(2) || image.dim(3) != mask.dim(3)) throw ShapeError("augment: mask not aligned");
  const auto tf = AugmentTransform::draw(rng, flags, image.dim(3), image.dim(2));
  return apply_transform(image, mask, tf);
}

// ---- procedural toy dataset ------------------------------------------------------

struct ToyConfig {
  int canvas = 64;
  int embed_dim = 1024;
  std::vector<std::array<float, 3>> palette = {{0.85f, 0.15f, 0.15f}, {0.15f, 0.75f, 0.20f}, {0.15f, 0.30f, 0.90f}};

  void validate() const {
    if (canvas < 16) throw ConfigError("toy canvas must be at least 16 pixels");
    if (palette.empty()) throw ConfigError("toy palette is empty");
    for (const auto& c : palette) AttributeSpec{ShapeKind::ellipse, c, SizeClass::small}.validate();
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyConfig, canvas, embed_dim, palette)

// Half-extent of a shape as a fraction of the canvas side.
inline double toy_half_extent(SizeClass s, int canvas) {
  static constexpr double kFrac[] = {0.12, 0.18, 0.24};
  return kFrac[static_cast<int>(s)] * canvas;
}

// Closed-form area of the shape drawn for (shape, size): the vertical
// half-extent is 0.75 of the horizontal one for ellipses and rectangles; the
// triangle spans 2r by 2r.
inline double toy_shape_area(ShapeKind shape, SizeClass size, int canvas) {
  const double r = toy_half_extent(size, canvas);
  switch (shape) {
    case ShapeKind::ellipse:
      return M_PI * r * 0.75 * r;
    case ShapeKind::rectangle:
      return 4.0 * r * 0.75 * r;
    case ShapeKind::triangle:
      return 2.0 * r * r;
  }
  return 0.0;
}

inline bool toy_inside(ShapeKind shape, double r, double dx, double dy) {
  const double ry = 0.75 * r;
  switch (shape) {
    case ShapeKind::ellipse:
      return (dx * dx) / (r * r) + (dy * dy) / (ry * ry) <= 1.0;
    case ShapeKind::rectangle:
      return std::abs(dx) <= r && std::abs(dy) <= ry;
    case ShapeKind::triangle: {
      // apex (0, -r), base corners (+-r, r)
      if (dy < -r || dy > r) return false;
      const double half_width = (dy + r) * 0.5;
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

// Object-free background in [0, 1]: tinted grey, a low-frequency sinusoid
// gradient and bilinear value noise. Returned as [1, 3, S, S] in [-1, 1].
inline Tensor<float> toy_background(Rng& rng, int S) {
  const double grey = rng.uniform(0.35, 0.65);
  std::array<double, 3> base{};
  for (auto& b : base) b = grey + rng.uniform(-0.06, 0.06);
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double freq = rng.uniform(0.5, 1.5) * 2.0 * M_PI / S;
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double amp = rng.uniform(0.05, 0.12);
  const double ux = std::cos(angle), uy = std::sin(angle);
  constexpr int G = 9;  // noise lattice
  std::vector<double> lattice(static_cast<std::size_t>(G) * G * 3);
  for (auto& v : lattice) v = rng.normal(0.0, 0.03);
  Tensor<float> out({1, 3, S, S});
  for (int y = 0; y < S; ++y) {
    const double gy = static_cast<double>(y) / (S - 1) * (G - 1);
    const int y0 = std::min(static_cast<int>(gy), G - 2);
    const double ay = gy - y0;
    for (int x = 0; x < S; ++x) {
      const double gx = static_cast<double>(x) / (S - 1) * (G - 1);
      const int x0 = std::min(static_cast<int>(gx), G - 2);
      const double ax = gx - x0;
      const double wave = amp * std::sin(freq * (ux * x + uy * y) + phase);
      for (int c = 0; c < 3; ++c) {
        auto L = [&](int yy, int xx) { return lattice[(static_cast<std::size_t>(yy) * G + xx) * 3 + c]; };
        const double noise = (L(y0, x0) * (1 - ax) + L(y0, x0 + 1) * ax) * (1 - ay) +
                             (L(y0 + 1, x0) * (1 - ax) + L(y0 + 1, x0 + 1) * ax) * ay;
        const double v = std::clamp(base[c] + wave + noise, 0.0, 1.0);
        out.at(0, c, y, x) = static_cast<float>(v * 2.0 - 1.0);
      }
    }
  }
  return out;
}

struct ToySample {
  SceneSample sample;
  AttributeSpec attrs;
  Tensor<float> background;  // the clean base the object was painted on
};

inline AttributeSpec random_attributes(Rng& rng, const ToyConfig& cfg) {
  AttributeSpec a;
  a.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  a.color = cfg.palette[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.palette.size()) - 1))];
  a.size = static_cast<SizeClass>(rng.uniform_int(0, 2));
  return a;
}

// Renders `attrs` onto `background` at centre (cx, cy). Coverage comes from
// 4x4 supersampling; the mask is coverage >= 0.5 and colour is blended only
// inside the mask so unmasked pixels equal the background bit for bit.
inline std::pair<Tensor<float>, Tensor<float>> render_toy_shape(const Tensor<float>& background,
                                                                const AttributeSpec& attrs, double cx, double cy) {
  const int S = background.dim(3);
  const double r = toy_half_extent(attrs.size, S);
  Tensor<float> image = background;
  Tensor<float> mask({1, 1, S, S});
  constexpr int SS = 4;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      int hits = 0;
      for (int sy = 0; sy < SS; ++sy) {
        for (int sx = 0; sx < SS; ++sx) {
          const double px = x + (sx + 0.5) / SS, py = y + (sy + 0.5) / SS;
          hits += toy_inside(attrs.shape, r, px - cx, py - cy) ? 1 : 0;
        }
      }
      const float alpha = static_cast<float>(hits) / (SS * SS);
      if (alpha < 0.5f) continue;
      mask.at(0, 0, y, x) = 1.0f;
      for (int c = 0; c < 3; ++c) {
        const float col = attrs.color[static_cast<std::size_t>(c)] * 2.0f - 1.0f;
        image.at(0, c, y, x) = background.at(0, c, y, x) * (1.0f - alpha) + col * alpha;
      }
    }
  }
  return {std::move(image), std::move(mask)};
}

inline ToySample make_toy_sample(Rng& rng, const ToyConfig& cfg, std::optional<AttributeSpec> attrs = std::nullopt) {
  const int S = cfg.canvas;
  ToySample out;
  out.attrs = attrs ? *attrs : random_attributes(rng, cfg);
  out.attrs.validate();
  out.background = toy_background(rng, S);
  const double r = toy_half_extent(out.attrs.size, S);
  const double margin = r + 2.0;
  const double cx = rng.uniform(margin, S - margin);
  const double cy = rng.uniform(margin, S - margin);
  auto [image, mask] = render_toy_shape(out.background, out.attrs, cx, cy);
  out.sample.image = std::move(image);
  out.sample.mask = std::move(mask);
  out.sample.embedding = toy_encode(out.attrs, cfg.embed_dim);
  const int cls = static_cast<int>(out.attrs.shape) * 9 + static_cast<int>(out.attrs.size) * 3;
  out.sample.class_id = cls;
  return out;
}

// Colour-threshold object detector used to score generated masks on toy
// images: a pixel is "object" when it lies within `radius` (RGB distance in
// [0, 1] units) of any palette colour.
inline Tensor<float> detect_toy_object(const Tensor<float>& images, const std::vector<std::array<float, 3>>& palette,
                                       double radius = 0.35) {
  const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
  Tensor<float> out({N, 1, H, W});
  for (int n = 0; n < N; ++n) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        bool hit = false;
        for (const auto& p : palette) {
          double d2 = 0.0;
          for (int c = 0; c < 3; ++c) {
            const double v = (images.at(n, c, y, x) + 1.0) * 0.5 - p[static_cast<std::size_t>(c)];
            d2 += v * v;
          }
          if (d2 <= radius * radius) {
            hit = true;
            break;
          }
        }
        out.at(n, 0, y, x) = hit ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

// ---- sample sources used by the trainer ----------------------------------------

// Random-access provider of real samples and object-free bases.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual int size() const = 0;
  virtual SceneSample get(int index, Rng& rng) const = 0;
  virtual Tensor<float> background(Rng& rng) const = 0;
  virtual int image_size() const = 0;
};

class ToySource final : public SampleSource {
 public:
  ToySource(std::vector<ToySample> samples, int size) : samples_(std::move(samples)), size_(size) {
    if (samples_.empty()) throw ConfigError("toy source is empty");
  }

  int size() const override { return static_cast<int>(samples_.size()); }
  SceneSample get(int index, Rng&) const override { return samples_.at(static_cast<std::size_t>(index)).sample; }
  Tensor<float> background(Rng& rng) const override {
    return samples_[static_cast<std::size_t>(rng.uniform_int(0, size() - 1))].background;
  }
  int image_size() const override { return size_; }
  const std::vector<ToySample>& samples() const { return samples_; }

 private:
  std::vector<ToySample> samples_;
  int size_;
};

inline std::vector<ToySample> make_toy_samples(int count, std::uint64_t seed, const ToyConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  std::vector<ToySample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(make_toy_sample(rng, cfg));
    out.back().sample.image_id = "toy_" + std::to_string(i);
  }
  return out;
}

// ---- manifests -----------------------------------------------------------------

struct ManifestRecord {
  std::string image_id;
  std::string image;
  std::string mask;
  std::vector<int> embedding_rows;
  std::string split = "train";
  int class_id = -1;
  std::optional<AttributeSpec> attributes;
  std::string background;  // optional clean base (toy datasets)
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = {{"image_id", r.image_id},
       {"image", r.image},
       {"mask", r.mask},
       {"embedding_rows", r.embedding_rows},
       {"split", r.split},
       {"class_id", r.class_id}};
  if (r.attributes) j["attributes"] = *r.attributes;
  if (!r.background.empty()) j["background"] = r.background;
}

inline void from_json(const nlohmann::json& j, ManifestRecord& r) {
  r.image_id = j.at("image_id").get<std::string>();
  r.image = j.at("image").get<std::string>();
  r.mask = j.at("mask").get<std::string>();
  r.embedding_rows = j.at("embedding_rows").get<std::vector<int>>();
  r.split = j.value("split", std::string("train"));
  r.class_id = j.value("class_id", -1);
  if (j.contains("attributes")) r.attributes = j.at("attributes").get<AttributeSpec>();
  r.background = j.value("background", std::string());
}

// Background pool: either crops sampled from the dataset images themselves
// ("crops_from_images") or a directory of object-free photos ("directory").
struct BackgroundPool {
  std::string mode = "crops_from_images";
  std::string dir;
  double max_overlap = 0.01;
  int max_tries = 50;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackgroundPool, mode, dir, max_overlap, max_tries)

struct DatasetManifest {
  fs::path root;
  std::string embeddings = "embeddings.bin";
  int image_size = 64;
  std::vector<ManifestRecord> records;
  BackgroundPool backgrounds;

  fs::path resolve(const std::string& rel) const { return root / rel; }

  void validate() const {
    std::set<std::string> ids;
    for (const auto& r : records) {
      if (!ids.insert(r.image_id).second) throw FormatError("manifest: image_id '" + r.image_id + "' appears twice");
      if (r.split != "train" && r.split != "test") throw FormatError("manifest: bad split '" + r.split + "'");
      if (r.embedding_rows.empty()) throw FormatError("manifest: record '" + r.image_id + "' has no embedding rows");
      for (const auto* f : {&r.image, &r.mask}) {
        if (!fs::exists(resolve(*f))) throw FormatError("manifest: missing file " + resolve(*f).string());
      }
      if (!r.background.empty() && !fs::exists(resolve(r.background))) {
        throw FormatError("manifest: missing file " + resolve(r.background).string());
      }
    }
    if (!fs::exists(resolve(embeddings))) throw FormatError("manifest: missing file " + resolve(embeddings).string());
    if (backgrounds.mode == "directory") {
      if (!fs::is_directory(resolve(backgrounds.dir))) throw FormatError("manifest: background directory missing");
    } else if (backgrounds.mode != "crops_from_images") {
      throw FormatError("manifest: unknown background mode '" + backgrounds.mode + "'");
    }
  }
};

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  nlohmann::json j = {{"embeddings", m.embeddings},
                      {"image_size", m.image_size},
                      {"records", m.records},
                      {"backgrounds", m.backgrounds}};
  std::ofstream(path) << j.dump(2) << "\n";
}

// Paths inside the manifest are relative to its directory.
inline DatasetManifest read_manifest_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.root = path.parent_path();
  m.embeddings = j.value("embeddings", m.embeddings);
  m.image_size = j.value("image_size", m.image_size);
  m.records = j.at("records").get<std::vector<ManifestRecord>>();
  if (j.contains("backgrounds")) m.backgrounds = j.at("backgrounds").get<BackgroundPool>();
  return m;
}

// Lazily decoding dataset over one split of a manifest.
class ManifestDataset final : public SampleSource {
 public:
  ManifestDataset(DatasetManifest manifest, const std::string& split, int size, int embed_dim = 0)
      : manifest_(std::move(manifest)), size_(size) {
    manifest_.validate();
    table_ = load_embeddings(manifest_.resolve(manifest_.embeddings), embed_dim);
    for (const auto& r : manifest_.records) {
      if (!split.empty() && r.split != split) continue;
      for (int row : r.embedding_rows) {
        if (row < 0 || row >= table_.count) throw FormatError("manifest: embedding row out of range for " + r.image_id);
      }
      records_.push_back(r);
    }
    if (manifest_.backgrounds.mode == "directory") {
      for (const auto& e : fs::directory_iterator(manifest_.resolve(manifest_.backgrounds.dir))) {
        if (e.path().extension() == ".png") background_files_.push_back(e.path());
      }
      std::sort(background_files_.begin(), background_files_.end());
      if (background_files_.empty()) throw FormatError("manifest: background directory has no PNG files");
    }
  }

  int size() const override { return static_cast<int>(records_.size()); }
  int image_size() const override { return size_; }
  const EmbeddingTable& table() const { return table_; }
  const std::vector<ManifestRecord>& records() const { return records_; }

  // Decodes record `index`; the caption row is drawn uniformly from the rng.
  SceneSample get(int index, Rng& rng) const override {
    const auto& r = records_.at(static_cast<std::size_t>(index));
    auto [image, mask] = decode_pair(r);
    SceneSample s;
    s.image = resize_bilinear(image, size_, size_);
    s.mask = resize_nearest(mask, size_, size_);
    const int pick = rng.uniform_int(0, static_cast<int>(r.embedding_rows.size()) - 1);
    s.caption_row = r.embedding_rows[static_cast<std::size_t>(pick)];
    s.embedding = table_.embedding(s.caption_row);
    s.image_id = r.image_id;
    s.class_id = r.class_id;
    return s;
  }

  // Object-free base at model resolution. Crops are taken at the target size
  // from the native-resolution image; records too small or too covered are
  // skipped, and after a bounded number of records the least covered crop wins.
  Tensor<float> background(Rng& rng) const override {
    if (!background_files_.empty()) {
      const auto& p = background_files_[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(background_files_.size()) - 1))];
      return resize_bilinear(image_from_mat(read_mat(p, cv::IMREAD_COLOR)), size_, size_);
    }
    const auto& pool = manifest_.backgrounds;
    std::optional<BackgroundCrop> best;
    for (int attempt = 0; attempt < 20; ++attempt) {
      const auto& r = records_[static_cast<std::size_t>(rng.uniform_int(0, size() - 1))];
      if (!r.background.empty()) {
        return resize_bilinear(image_from_mat(read_mat(manifest_.resolve(r.background), cv::IMREAD_COLOR)), size_,
                               size_);
      }
      auto [image, mask] = decode_pair(r);
      if (image.dim(2) < size_ || image.dim(3) < size_) continue;
      auto crop = sample_background_crop(image, mask, size_, rng, pool.max_overlap, pool.max_tries);
      if (crop) return crop->image;
    }
    throw FormatError("could not find an object-free background crop in the dataset");
  }

 private:
  std::pair<Tensor<float>, Tensor<float>> decode_pair(const ManifestRecord& r) const {
    auto image = image_from_mat(read_mat(manifest_.resolve(r.image), cv::IMREAD_COLOR));
    auto mask = mask_from_mat(read_mat(manifest_.resolve(r.mask), cv::IMREAD_GRAYSCALE));
    if (image.dim(2) != mask.dim(2) || image.dim(3) != mask.dim(3)) {
      throw FormatError("mask/image size mismatch for " + r.image_id);
    }
    return {std::move(image), std::move(mask)};
  }

  DatasetManifest manifest_;
  int size_;
  EmbeddingTable table_;
  std::vector<ManifestRecord> records_;
  std::vector<fs::path> background_files_;
};

// Writes a self-contained toy dataset directory: images/, masks/,
// backgrounds/, embeddings.bin (+ index) and manifest.json. The first
// `test_count` samples go to the test split.
inline DatasetManifest write_toy_dataset(const fs::path& dir, int count, int test_count, std::uint64_t seed,
                                         const ToyConfig& cfg) {
  const auto samples = make_toy_samples(count, seed, cfg);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "backgrounds");
  DatasetManifest m;
  m.root = dir;
  m.image_size = cfg.canvas;
  EmbeddingTable table;
  table.dim = cfg.embed_dim;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ManifestRecord r;
    r.image_id = s.sample.image_id;
    r.image = "images/" + r.image_id + ".png";
    r.mask = "masks/" + r.image_id + ".png";
    r.background = "backgrounds/" + r.image_id + ".png";
    r.split = static_cast<int>(i) < test_count ? "test" : "train";
    r.class_id = s.sample.class_id;
    r.attributes = s.attrs;
    r.embedding_rows = {table.count};
    write_png(dir / r.image, mat_from_image(s.sample.image));
    Tensor<float> mask01 = s.sample.mask;
    write_png(dir / r.mask, mat_from_gray(mask01));
    write_png(dir / r.background, mat_from_image(s.background));
    table.rows.insert(table.rows.end(), s.sample.embedding.values.begin(), s.sample.embedding.values.end());
    table.index[r.image_id] = r.embedding_rows;
    ++table.count;
    m.records.push_back(std::move(r));
  }
  save_embeddings(table, dir / m.embeddings);
  save_embedding_index(table, dir / "embeddings_index.json");
  write_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace mcgan
