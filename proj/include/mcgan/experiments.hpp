// SPDX-License-Identifier: Apache-2.0
//
// Inference-only drivers: text interpolation, noise sweep, switch override
// sweep, switch/mask statistics and the toy evaluation metrics. Drivers run
// the generator in inference mode (running BN statistics) without recording
// a graph, so they never change model state.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcgan/checkpoint.hpp"
#include "mcgan/data.hpp"
#include "mcgan/generator.hpp"
#include "mcgan/losses.hpp"

namespace mcgan {

template <class T>
double scalar_value(const Var<T>& v) {
  return static_cast<double>(v.value()[0]);
}

template <class T = float>
Generator<T> load_generator(const std::filesystem::path& dir) {
  const auto m = read_manifest(dir);
  Rng rng(0);
  Generator<T> gen(m.hp, rng);
  load_tensors(dir, gen.tensors());
  gen.set_training(false);
  return gen;
}

// Restores the generator's training flag on scope exit.
template <class T>
class InferenceScope {
 public:
  explicit InferenceScope(Generator<T>& g) : gen_(g), was_training_(g.training()) { gen_.set_training(false); }
  ~InferenceScope() { gen_.set_training(was_training_); }
  InferenceScope(const InferenceScope&) = delete;
  InferenceScope& operator=(const InferenceScope&) = delete;

 private:
  Generator<T>& gen_;
  bool was_training_;
};

template <class T>
Tensor<T> embedding_row(const TextEmbedding& e) {
  Tensor<T> t({1, e.dim()});
  for (int i = 0; i < e.dim(); ++i) t[static_cast<std::size_t>(i)] = static_cast<T>(e.values[static_cast<std::size_t>(i)]);
  return t;
}

// Single-sample inference; b is [1,3,H,W], eps [1,C], z [1,Z].
template <class T>
GenOutput<T> generate_one(Generator<T>& gen, const Tensor<T>& b, const TextEmbedding& phi, const Tensor<T>& eps,
                          const Tensor<T>& z, const SwitchOverride& ov = SwitchOverride::learned()) {
  NoGradGuard ng;
  InferenceScope<T> scope(gen);
  return gen
      .generate_from_embedding(Var<T>::constant(b), Var<T>::constant(embedding_row<T>(phi)), eps, Var<T>::constant(z),
                               ov)
      .first;
}

inline double l2_distance(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SweepResult {
  std::vector<std::string> labels;
  std::vector<Tensor<float>> images;  // each [1,3,H,W]
  std::vector<Tensor<float>> masks;   // each [1,1,H,W]
  nlohmann::json metrics;

  cv::Mat grid(int columns = 0) const {
    std::vector<cv::Mat> tiles;
    for (const auto& im : images) tiles.push_back(mat_from_image(im));
    for (const auto& m : masks) tiles.push_back(mat_from_gray(m));
    return make_grid(tiles, columns > 0 ? columns : static_cast<int>(images.size()));
  }

  // Writes <name>.png (images over masks) and <name>.json.
  void write(const std::filesystem::path& dir, const std::string& name) const {
    std::filesystem::create_directories(dir);
    write_png(dir / (name + ".png"), grid());
    std::ofstream(dir / (name + ".json")) << metrics.dump(2) << "\n";
  }
};

// ---- metrics schema ---------------------------------------------------------------

// Minimal structural schema: required keys per kind with their JSON types.
inline void validate_metrics(const nlohmann::json& m) {
  using nlohmann::json;
  auto fail = [](const std::string& msg) { throw FormatError("metrics: " + msg); };
  if (!m.is_object()) fail("not an object");
  if (!m.contains("kind") || !m["kind"].is_string()) fail("missing 'kind'");
  if (!m.contains("schema_version") || m["schema_version"] != 1) fail("schema_version must be 1");
  auto need = [&](const char* key, json::value_t type) {
    if (!m.contains(key)) fail(std::string("missing '") + key + "'");
    const auto t = m[key].type();
    const bool number = type == json::value_t::number_float &&
                        (t == json::value_t::number_float || t == json::value_t::number_integer ||
                         t == json::value_t::number_unsigned);
    const bool count = type == json::value_t::number_unsigned && t == json::value_t::number_integer &&
                       m[key].get<long long>() >= 0;
    if (t != type && !number && !count) fail(std::string("'") + key + "' has the wrong type");
  };
  auto numbers = [&](const char* key) {
    need(key, json::value_t::array);
    for (const auto& v : m[key]) {
      if (!v.is_number()) fail(std::string("'") + key + "' must hold numbers");
    }
  };
  const auto kind = m["kind"].get<std::string>();
  if (kind == "interpolation") {
    need("steps", json::value_t::number_unsigned);
    numbers("alphas");
    numbers("deltas");
    need("max_delta", json::value_t::number_float);
    need("median_delta", json::value_t::number_float);
    need("all_finite", json::value_t::boolean);
  } else if (kind == "noise_sweep") {
    need("steps", json::value_t::number_unsigned);
    numbers("alphas");
    need("all_finite", json::value_t::boolean);
    need("in_range", json::value_t::boolean);
  } else if (kind == "switch_sweep") {
    need("labels", json::value_t::array);
    numbers("background_l1");
    need("selector_fraction", json::value_t::number_float);
  } else if (kind == "switch_stats") {
    for (const char* k : {"mean_in", "mean_out", "gap"}) {
      if (!m.contains(k)) fail(std::string("missing '") + k + "'");
      if (!m[k].is_null() && !m[k].is_number()) fail(std::string("'") + k + "' must be a number or null");
    }
  } else {
    fail("unknown kind '" + kind + "'");
  }
}

// ---- drivers -------------------------------------------------------------------------

template <class T>
SweepResult run_interpolation(Generator<T>& gen, const Tensor<T>& b, const TextEmbedding& phi1,
                              const TextEmbedding& phi2, const Tensor<T>& z, const Tensor<T>& eps, int steps = 8) {
  if (steps < 2) throw std::invalid_argument("run_interpolation: steps must be at least 2");
  SweepResult r;
  std::vector<double> alphas;
  bool finite = true;
  for (int i = 0; i < steps; ++i) {
    const double a = static_cast<double>(i) / (steps - 1);
    alphas.push_back(a);
    const auto out = generate_one(gen, b, interpolate(phi1, phi2, a), eps, z);
    r.images.push_back(out.image.value().template cast<float>());
    r.masks.push_back(out.mask.value().template cast<float>());
    r.labels.push_back("alpha=" + nlohmann::json(a).dump());
    finite = finite && all_finite(r.images.back()) && all_finite(r.masks.back());
  }
  std::vector<double> deltas;
  for (int i = 0; i + 1 < steps; ++i) deltas.push_back(l2_distance(r.images[i], r.images[i + 1]));
  r.metrics = {{"kind", "interpolation"},
               {"schema_version", 1},
               {"steps", steps},
               {"alphas", alphas},
               {"deltas", deltas},
               {"max_delta", *std::max_element(deltas.begin(), deltas.end())},
               {"median_delta", median(deltas)},
               {"all_finite", finite}};
  return r;
}

template <class T>
SweepResult run_noise_sweep(Generator<T>& gen, const Tensor<T>& b, const TextEmbedding& phi, const Tensor<T>& eps,
                            int steps = 8) {
  if (steps < 2) throw std::invalid_argument("run_noise_sweep: steps must be at least 2");
  const int Z = gen.hyperparams().noise_dim;
  SweepResult r;
  std::vector<double> alphas;
  bool finite = true, in_range = true;
  for (int i = 0; i < steps; ++i) {
    const double a = static_cast<double>(i) / (steps - 1);
    alphas.push_back(a);
    const Tensor<T> z({1, Z}, static_cast<T>(a));  // (1-a)*0 + a*1
    const auto out = generate_one(gen, b, phi, eps, z);
    r.images.push_back(out.image.value().template cast<float>());
    r.masks.push_back(out.mask.value().template cast<float>());
    r.labels.push_back("alpha=" + nlohmann::json(a).dump());
    finite = finite && all_finite(r.images.back()) && all_finite(r.masks.back());
    for (float v : r.images.back().values()) in_range = in_range && v >= -1.0f && v <= 1.0f;
    for (float v : r.masks.back().values()) in_range = in_range && v >= 0.0f && v <= 1.0f;
  }
  r.metrics = {{"kind", "noise_sweep"},
               {"schema_version", 1},
               {"steps", steps},
               {"alphas", alphas},
               {"all_finite", finite},
               {"in_range", in_range}};
  return r;
}

// Outputs for overrides {0, 0.5, 1, learned}; background L1 of each uses the
// selector built from the learned-mode mask.
template <class T>
SweepResult run_switch_sweep(Generator<T>& gen, const Tensor<T>& b, const TextEmbedding& phi, const Tensor<T>& z,
                             const Tensor<T>& eps, const SelectorParams& sel = {}) {
  const std::vector<std::pair<std::string, SwitchOverride>> modes = {{"switch=0", SwitchOverride::constant(0.0)},
                                                                     {"switch=0.5", SwitchOverride::constant(0.5)},
                                                                     {"switch=1", SwitchOverride::constant(1.0)},
                                                                     {"learned", SwitchOverride::learned()}};
  SweepResult r;
  for (const auto& [label, ov] : modes) {
    const auto out = generate_one(gen, b, phi, eps, z, ov);
    r.labels.push_back(label);
    r.images.push_back(out.image.value().template cast<float>());
    r.masks.push_back(out.mask.value().template cast<float>());
  }
  const Tensor<float> selector = background_selector(r.masks.back(), sel);
  double frac = 0.0;
  for (float v : selector.values()) frac += v;
  frac /= static_cast<double>(selector.size());
  const Tensor<float> bf = b.template cast<float>();
  std::vector<double> l1;
  for (const auto& im : r.images) {
    NoGradGuard ng;
    l1.push_back(scalar_value(ops::masked_l1(Var<float>::constant(im), bf, selector)));
  }
  r.metrics = {{"kind", "switch_sweep"},
               {"schema_version", 1},
               {"labels", r.labels},
               {"background_l1", l1},
               {"selector_fraction", frac}};
  return r;
}

// ---- switch statistics --------------------------------------------------------------

struct SwitchStats {
  std::optional<double> mean_in, mean_out, gap;
  long long count_in = 0, count_out = 0;
};

inline void to_json(nlohmann::json& j, const SwitchStats& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"kind", "switch_stats"},     {"schema_version", 1},         {"mean_in", opt(s.mean_in)},
       {"mean_out", opt(s.mean_out)}, {"gap", opt(s.gap)},           {"count_in", s.count_in},
       {"count_out", s.count_out}};
}

// Channel-mean of `sw` [B,C,h,w], nearest-resized to the mask grid
// [B,1,H,W], averaged inside (mask >= 0.5) and outside the object.
template <class T>
SwitchStats switch_mask_stats(const Tensor<T>& sw, const Tensor<float>& mask) {
  if (sw.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || sw.dim(0) != mask.dim(0)) {
    throw ShapeError("switch_mask_stats: switch " + shape_str(sw.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  const int B = sw.dim(0), C = sw.dim(1), h = sw.dim(2), w = sw.dim(3), H = mask.dim(2), W = mask.dim(3);
  double sum_in = 0, sum_out = 0;
  SwitchStats st;
  for (int n = 0; n < B; ++n) {
    for (int y = 0; y < H; ++y) {
      const int sy = std::min(h - 1, y * h / H);
      for (int x = 0; x < W; ++x) {
        const int sx = std::min(w - 1, x * w / W);
        double m = 0;
        for (int c = 0; c < C; ++c) m += sw.at(n, c, sy, sx);
        m /= C;
        if (mask.at(n, 0, y, x) >= 0.5f) {
          sum_in += m;
          ++st.count_in;
        } else {
          sum_out += m;
          ++st.count_out;
        }
      }
    }
  }
  if (st.count_in > 0) st.mean_in = sum_in / st.count_in;
  if (st.count_out > 0) st.mean_out = sum_out / st.count_out;
  if (st.mean_in && st.mean_out) st.gap = *st.mean_in - *st.mean_out;
  return st;
}

inline Tensor<float> binarize(const Tensor<float>& t, float threshold = 0.5f) {
  Tensor<float> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

// Mean over samples of |A ∩ B| / |A ∪ B|; a pair with an empty union counts as 1.
inline double mean_iou(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mean_iou: shape mismatch");
  const int N = a.dim(0);
  const std::size_t per = a.size() / static_cast<std::size_t>(N);
  double total = 0;
  for (int n = 0; n < N; ++n) {
    long long inter = 0, uni = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const bool x = a[n * per + i] >= 0.5f, y = b[n * per + i] >= 0.5f;
      inter += x && y;
      uni += x || y;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
  }
  return total / N;
}

// Intersection over union pooled across the whole batch. Unlike mean_iou an
// empty prediction scores 0 whenever the reference has any pixels.
inline double pooled_iou(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ShapeError("pooled_iou: shape mismatch");
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= 0.5f, y = b[i] >= 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- toy evaluation --------------------------------------------------------------

struct ToyEvaluation {
  double background_l1 = 0;      // loss-definition L1_bg, mean over batches
  double background_mae = 0;     // mean |x - b| per selected pixel and channel
  double selector_fraction = 0;  // share of pixels the selector keeps
  SwitchStats switch_vs_mask;    // last-block switch vs binarized generated mask
  SwitchStats switch_vs_detector;
  double mask_iou = 0;           // pooled IoU, generated mask vs colour-threshold detector
  double mask_iou_per_sample = 0;
  double detector_coverage = 0;
  double mask_coverage = 0;      // mean binarized generated-mask area fraction
  int samples = 0;
};

inline void to_json(nlohmann::json& j, const ToyEvaluation& e) {
  j = {{"background_l1", e.background_l1},   {"background_mae", e.background_mae},
       {"selector_fraction", e.selector_fraction},
       {"switch_vs_mask", e.switch_vs_mask}, {"switch_vs_detector", e.switch_vs_detector},
       {"mask_iou", e.mask_iou},             {"mask_iou_per_sample", e.mask_iou_per_sample},
       {"mask_coverage", e.mask_coverage},   {"detector_coverage", e.detector_coverage},
       {"samples", e.samples}};
}

// Generates on each sample's clean background with its own caption, seeded
// noise, in inference mode and batches of `batch`.
template <class T>
ToyEvaluation evaluate_toy(Generator<T>& gen, const std::vector<ToySample>& samples,
                           const std::vector<std::array<float, 3>>& palette, std::uint64_t seed,
                           const SelectorParams& sel = {}, int batch = 25) {
  NoGradGuard ng;
  InferenceScope<T> scope(gen);
  const auto& hp = gen.hyperparams();
  Rng rng(seed);
  ToyEvaluation ev;
  std::vector<Tensor<float>> all_sw, all_mask, all_det;
  double l1_sum = 0, sel_sum = 0, cov_sum = 0, abs_sum = 0;
  int batches = 0;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch));
    std::vector<Tensor<float>> bases, phis;
    for (std::size_t i = start; i < end; ++i) {
      bases.push_back(samples[i].background);
      phis.push_back(Tensor<float>({1, hp.embed_dim}, samples[i].sample.embedding.values));
    }
    const int B = static_cast<int>(end - start);
    const Tensor<T> b = stack_batch(bases).template cast<T>();
    const Tensor<T> phi = stack_batch(phis).template cast<T>();
    const Tensor<T> eps = rng.normal_tensor<T>({B, hp.code_dim});
    const Tensor<T> z = rng.normal_tensor<T>({B, hp.noise_dim});
    auto out = gen.generate_from_embedding(Var<T>::constant(b), Var<T>::constant(phi), eps, Var<T>::constant(z)).first;
    const Tensor<float> img = out.image.value().template cast<float>();
    const Tensor<float> mask = out.mask.value().template cast<float>();
    const Tensor<float> selector = background_selector(mask, sel);
    const Tensor<float> bf = b.template cast<float>();
    l1_sum += scalar_value(ops::masked_l1(Var<float>::constant(img), bf, selector));
    for (float v : selector.values()) sel_sum += v;
    for (int n = 0; n < B; ++n) {
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.dim(2); ++y) {
          for (int x = 0; x < img.dim(3); ++x) {
            if (selector.at(n, 0, y, x) > 0) abs_sum += std::abs(img.at(n, c, y, x) - bf.at(n, c, y, x));
          }
        }
      }
    }
    const Tensor<float> bin = binarize(mask);
    for (float v : bin.values()) cov_sum += v;
    all_mask.push_back(bin);
    all_det.push_back(detect_toy_object(img, palette));
    all_sw.push_back(out.switches.back().value().template cast<float>());
    ++batches;
  }
  const Tensor<float> masks = stack_batch(all_mask), det = stack_batch(all_det), sw = stack_batch(all_sw);
  ev.samples = static_cast<int>(samples.size());
  ev.background_l1 = l1_sum / batches;
  ev.selector_fraction = sel_sum / static_cast<double>(masks.size());
  ev.background_mae = sel_sum > 0 ? abs_sum / (3.0 * sel_sum) : 0.0;
  ev.mask_coverage = cov_sum / static_cast<double>(masks.size());
  ev.switch_vs_mask = switch_mask_stats(sw, masks);
  ev.switch_vs_detector = switch_mask_stats(sw, det);
  ev.mask_iou = pooled_iou(masks, det);
  ev.mask_iou_per_sample = mean_iou(masks, det);
  double det_sum = 0;
  for (float v : det.values()) det_sum += v;
  ev.detector_coverage = det_sum / static_cast<double>(det.size());
  return ev;
}

}  // namespace mcgan
