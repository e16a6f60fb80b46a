// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint-backed inference: request parsing, paste-back composition and
// the HTTP front end. A single generator instance is shared by all requests
// and every inference call holds the service mutex.

#pragma once

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mcgan/data.hpp"
#include "mcgan/experiments.hpp"

// Must follow Eigen: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

namespace mcgan {

// ---- base64 ----------------------------------------------------------------------

inline std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

// Accepts an optional "data:...;base64," prefix and ignores whitespace.
inline std::vector<unsigned char> base64_decode(std::string_view text) {
  if (text.rfind("data:", 0) == 0) {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos) throw std::invalid_argument("malformed data URL");
    text.remove_prefix(comma + 1);
  }
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  }
  if (clean.empty() || clean.size() % 4 != 0) throw std::invalid_argument("base64 payload has invalid length");
  std::vector<unsigned char> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw std::invalid_argument("invalid base64 payload");
  std::size_t pad = 0;
  if (clean.back() == '=') ++pad;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ---- geometry and composition ------------------------------------------------------

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;

  void validate(int image_width, int image_height) const {
    if (w < 8 || h < 8) throw std::invalid_argument("bbox width and height must be at least 8");
    if (x < 0 || y < 0 || x + w > image_width || y + h > image_height) {
      throw std::invalid_argument("bbox (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) +
                                  "," + std::to_string(h) + ") lies outside the " + std::to_string(image_width) +
                                  "x" + std::to_string(image_height) + " image");
    }
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BBox, x, y, w, h)

// Base-image pixel that model-grid pixel (u, v) lands on after the bilinear
// resize of a size x size crop to the bbox (pixel-centre alignment).
inline std::pair<int, int> crop_to_base(const BBox& box, int size, int u, int v) {
  const double fx = (u + 0.5) * box.w / size - 0.5;
  const double fy = (v + 0.5) * box.h / size - 0.5;
  const int px = std::clamp(static_cast<int>(std::lround(fx)), 0, box.w - 1);
  const int py = std::clamp(static_cast<int>(std::lround(fy)), 0, box.h - 1);
  return {box.x + px, box.y + py};
}

enum class ComposeMode { full_paste, mask_blend };

inline ComposeMode parse_compose_mode(const std::string& s) {
  if (s == "full-paste") return ComposeMode::full_paste;
  if (s == "mask-blend") return ComposeMode::mask_blend;
  throw std::invalid_argument("unknown compose mode '" + s + "'");
}

struct ComposeParams {
  ComposeMode mode = ComposeMode::full_paste;
  int feather = 2;                // box-blur radius applied to the eroded mask
  float change_threshold = 0.1f;  // |crop - base crop| on the [-1, 1] scale
};

// base [1,3,H,W]; crop [1,3,S,S] and mask [1,1,S,S] at model resolution.
inline Tensor<float> compose(const Tensor<float>& base, const BBox& box, const Tensor<float>& crop,
                             const Tensor<float>& mask, const ComposeParams& p = {}) {
  box.validate(base.dim(3), base.dim(2));
  const Tensor<float> resized = resize_bilinear(crop, box.w, box.h);
  Tensor<float> out = base;
  if (p.mode == ComposeMode::full_paste) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < box.h; ++y) {
        for (int x = 0; x < box.w; ++x) out.at(0, c, box.y + y, box.x + x) = resized.at(0, c, y, x);
      }
    }
    return out;
  }
  // Alpha: eroded, feathered generated mask, united with pixels the generator
  // changed noticeably relative to the base.
  Tensor<float> m = resize_bilinear(mask, box.w, box.h);
  cv::Mat bin(box.h, box.w, CV_32FC1);
  for (int y = 0; y < box.h; ++y) {
    for (int x = 0; x < box.w; ++x) bin.at<float>(y, x) = m.at(0, 0, y, x) >= 0.5f ? 1.0f : 0.0f;
  }
  cv::erode(bin, bin, cv::getStructuringElement(cv::MORPH_RECT, cv::Size(3, 3)), cv::Point(-1, -1), 1,
            cv::BORDER_CONSTANT, cv::Scalar(0));
  if (p.feather > 0) cv::blur(bin, bin, cv::Size(2 * p.feather + 1, 2 * p.feather + 1), cv::Point(-1, -1),
                              cv::BORDER_REPLICATE);
  for (int y = 0; y < box.h; ++y) {
    for (int x = 0; x < box.w; ++x) {
      float diff = 0.0f;
      for (int c = 0; c < 3; ++c) {
        diff = std::max(diff, std::abs(resized.at(0, c, y, x) - base.at(0, c, box.y + y, box.x + x)));
      }
      const float alpha = diff > p.change_threshold ? 1.0f : std::clamp(bin.at<float>(y, x), 0.0f, 1.0f);
      for (int c = 0; c < 3; ++c) {
        float& dst = out.at(0, c, box.y + y, box.x + x);
        dst = alpha * resized.at(0, c, y, x) + (1.0f - alpha) * dst;
      }
    }
  }
  return out;
}

// ---- requests --------------------------------------------------------------------

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct GenerateRequest {
  std::vector<unsigned char> base_png;
  BBox bbox;
  std::optional<AttributeSpec> attrs;
  std::optional<int> embedding_row;
  std::optional<std::string> image_id;  // with caption index
  int caption = 0;
  std::uint64_t seed = 0;
  SwitchOverride overrides;
  bool return_debug = false;
  ComposeMode mode = ComposeMode::full_paste;
};

inline GenerateRequest parse_generate_request(const nlohmann::json& j) {
  GenerateRequest r;
  try {
    r.base_png = base64_decode(j.at("base_image").get<std::string>());
    r.bbox = j.at("bbox").get<BBox>();
    const auto& text = j.at("text");
    if (text.contains("attrs")) {
      r.attrs = text.at("attrs").get<AttributeSpec>();
    } else if (text.contains("embedding_row")) {
      r.embedding_row = text.at("embedding_row").get<int>();
    } else if (text.contains("image_id")) {
      r.image_id = text.at("image_id").get<std::string>();
      r.caption = text.value("caption", 0);
    } else {
      throw std::invalid_argument("text needs one of attrs, embedding_row or image_id");
    }
    r.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("overrides") && !j.at("overrides").is_null()) r.overrides = j.at("overrides").get<SwitchOverride>();
    r.return_debug = j.value("return_debug", false);
    r.mode = parse_compose_mode(j.value("mode", std::string("full-paste")));
  } catch (const std::exception& e) {
    throw HttpError(400, std::string("malformed request: ") + e.what());
  }
  return r;
}

struct CompositeResult {
  std::vector<unsigned char> composite_png, crop_png, mask_png;
  std::vector<std::vector<unsigned char>> switch_pngs;
  double generate_ms = 0, total_ms = 0;

  nlohmann::json to_json() const {
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& s : switch_pngs) maps.push_back(base64_encode(s));
    nlohmann::json j = {{"composite", base64_encode(composite_png)},
                        {"crop", base64_encode(crop_png)},
                        {"mask", base64_encode(mask_png)},
                        {"timing", {{"generate_ms", generate_ms}, {"total_ms", total_ms}}}};
    if (!switch_pngs.empty()) j["switch_maps"] = maps;
    return j;
  }
};

// Channel mean of a switch map [1,C,h,w] as an 8-bit image upscaled to `size`.
inline cv::Mat switch_map_image(const Tensor<float>& sw, int size) {
  const int C = sw.dim(1), h = sw.dim(2), w = sw.dim(3);
  Tensor<float> m({1, 1, h, w});
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) m.at(0, 0, y, x) += sw.at(0, c, y, x) / C;
    }
  }
  return mat_from_gray(resize_nearest(m, size, size));
}

class Service {
 public:
  void load_checkpoint(const std::filesystem::path& dir) {
    auto gen = load_generator<float>(dir);
    std::lock_guard lock(mu_);
    gen_.emplace(std::move(gen));
    checkpoint_ = dir.string();
  }

  void set_embeddings(EmbeddingTable table) {
    table.validate();
    std::lock_guard lock(mu_);
    table_ = std::move(table);
  }

  bool loaded() const {
    std::lock_guard lock(mu_);
    return gen_.has_value();
  }

  nlohmann::json model_info() const {
    std::lock_guard lock(mu_);
    if (!gen_) throw HttpError(409, "no checkpoint loaded");
    const auto& hp = gen_->hyperparams();
    return {{"checkpoint", checkpoint_},
            {"hyperparams", hp},
            {"channel_plan", hp.channel_plan()},
            {"switch_count", hp.switch_count()},
            {"resolution", hp.width}};
  }

  nlohmann::json embeddings_info() const {
    std::lock_guard lock(mu_);
    nlohmann::json j = {{"toy_attributes",
                         {{"shape", {"ellipse", "rectangle", "triangle"}},
                          {"size", {"small", "medium", "large"}},
                          {"color", "RGB triple in [0, 1]"},
                          {"palette", ToyConfig{}.palette}}}};
    if (table_) {
      nlohmann::json ids = nlohmann::json::object();
      for (const auto& [id, rows] : table_->index) ids[id] = rows;
      j["table"] = {{"count", table_->count}, {"dim", table_->dim}, {"image_ids", ids}};
    }
    return j;
  }

  CompositeResult handle_generate(const GenerateRequest& req) {
    const auto t0 = std::chrono::steady_clock::now();
    std::lock_guard lock(mu_);
    if (!gen_) throw HttpError(409, "no checkpoint loaded");
    const auto& hp = gen_->hyperparams();

    Tensor<float> base;
    try {
      base = image_from_mat(decode_png(req.base_png));
    } catch (const std::exception& e) {
      throw HttpError(400, std::string("base image: ") + e.what());
    }
    try {
      req.bbox.validate(base.dim(3), base.dim(2));
      req.overrides.validate();
      if (req.overrides.mode == SwitchOverride::Mode::per_block) (void)req.overrides.for_block(0, hp.switch_count());
    } catch (const std::exception& e) {
      throw HttpError(400, e.what());
    }
    const TextEmbedding phi = resolve_text(req, hp.embed_dim);

    const Tensor<float> crop =
        resize_bilinear(crop_image(base, req.bbox.x, req.bbox.y, req.bbox.w, req.bbox.h), hp.width, hp.height);
    Rng rng(req.seed);
    const Tensor<float> eps = rng.normal_tensor<float>({1, hp.code_dim});
    const Tensor<float> z = rng.normal_tensor<float>({1, hp.noise_dim});
    const auto tg = std::chrono::steady_clock::now();
    const GenOutput<float> out = generate_one(*gen_, crop, phi, eps, z, req.overrides);
    const auto tg1 = std::chrono::steady_clock::now();

    ComposeParams cp;
    cp.mode = req.mode;
    const Tensor<float> composite = compose(base, req.bbox, out.image.value(), out.mask.value(), cp);
    CompositeResult r;
    r.composite_png = encode_png(mat_from_image(composite));
    r.crop_png = encode_png(mat_from_image(out.image.value()));
    r.mask_png = encode_png(mat_from_gray(out.mask.value()));
    if (req.return_debug) {
      for (const auto& sw : out.switches) r.switch_pngs.push_back(encode_png(switch_map_image(sw.value(), hp.width)));
    }
    r.generate_ms = std::chrono::duration<double, std::milli>(tg1 - tg).count();
    r.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  // JSON in, (status, JSON) out; never throws.
  std::pair<int, nlohmann::json> handle_generate_json(const std::string& body) {
    try {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(body);
      } catch (const nlohmann::json::exception& e) {
        throw HttpError(400, std::string("request is not valid JSON: ") + e.what());
      }
      return {200, handle_generate(parse_generate_request(j)).to_json()};
    } catch (const HttpError& e) {
      return {e.status(), {{"error", e.what()}, {"status", e.status()}}};
    } catch (const std::exception& e) {
      return {500, {{"error", std::string("internal failure: ") + e.what()}, {"status", 500}}};
    }
  }

 private:
  TextEmbedding resolve_text(const GenerateRequest& req, int dim) const {
    if (req.attrs) {
      try {
        return toy_encode(*req.attrs, dim);
      } catch (const std::exception& e) {
        throw HttpError(400, e.what());
      }
    }
    if (!table_) throw HttpError(404, "no embedding table loaded");
    if (req.embedding_row) {
      if (*req.embedding_row < 0 || *req.embedding_row >= table_->count) {
        throw HttpError(404, "unknown embedding row " + std::to_string(*req.embedding_row));
      }
      return table_->embedding(*req.embedding_row);
    }
    const auto it = table_->index.find(*req.image_id);
    if (it == table_->index.end()) throw HttpError(404, "unknown image_id '" + *req.image_id + "'");
    if (req.caption < 0 || req.caption >= static_cast<int>(it->second.size())) {
      throw HttpError(404, "image '" + *req.image_id + "' has no caption " + std::to_string(req.caption));
    }
    return table_->embedding(it->second[static_cast<std::size_t>(req.caption)]);
  }

  mutable std::mutex mu_;
  std::optional<Generator<float>> gen_;
  std::optional<EmbeddingTable> table_;
  std::string checkpoint_;
};

// Registers the routes on `server`. CORS is open so a browser client served
// from another origin can call the API.
inline void install_routes(httplib::Server& server, Service& service) {
  auto send = [](httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(), "application/json");
  };
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.status = 204;
  });
  server.Get("/health", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, 200, {{"status", "ok"}, {"model_loaded", service.loaded()}});
  });
  server.Get("/model", [&service, send](const httplib::Request&, httplib::Response& res) {
    try {
      send(res, 200, service.model_info());
    } catch (const HttpError& e) {
      send(res, e.status(), {{"error", e.what()}, {"status", e.status()}});
    }
  });
  server.Get("/embeddings", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, 200, service.embeddings_info());
  });
  server.Post("/generate", [&service, send](const httplib::Request& req, httplib::Response& res) {
    auto [status, body] = service.handle_generate_json(req.body);
    send(res, status, body);
  });
}

}  // namespace mcgan
