// SPDX-License-Identifier: Apache-2.0
//
// Conversions between OpenCV 8-bit images and [-1, 1] NCHW tensors, PNG
// encode/decode, resizing and grid assembly.

#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mcgan/tensor.hpp"

namespace mcgan {

inline unsigned char to_u8(float v01) {
  return static_cast<unsigned char>(std::lround(std::clamp(v01, 0.0f, 1.0f) * 255.0f));
}

// 8-bit BGR or gray Mat -> [1, 3, H, W] RGB tensor in [-1, 1].
inline Tensor<float> image_from_mat(const cv::Mat& mat) {
  if (mat.empty()) throw FormatError("empty image");
  cv::Mat bgr;
  if (mat.channels() == 1) {
    cv::cvtColor(mat, bgr, cv::COLOR_GRAY2BGR);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, bgr, cv::COLOR_BGRA2BGR);
  } else {
    bgr = mat;
  }
  if (bgr.depth() != CV_8U) throw FormatError("only 8-bit images are supported");
  const int H = bgr.rows, W = bgr.cols;
  Tensor<float> t({1, 3, H, W});
  for (int y = 0; y < H; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = row[x][2 - c] / 127.5f - 1.0f;
    }
  }
  return t;
}

// Sample n of a [B, 3, H, W] tensor in [-1, 1] -> 8-bit BGR Mat.
inline cv::Mat mat_from_image(const Tensor<float>& t, int n = 0) {
  if (t.rank() != 4 || t.dim(1) != 3) throw ShapeError("mat_from_image: expected [B,3,H,W], got " + shape_str(t.shape()));
  const int H = t.dim(2), W = t.dim(3);
  cv::Mat mat(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = to_u8((t.at(n, c, y, x) + 1.0f) * 0.5f);
    }
  }
  return mat;
}

// Sample n of a [B, 1, H, W] tensor in [0, 1] -> 8-bit gray Mat.
inline cv::Mat mat_from_gray(const Tensor<float>& t, int n = 0) {
  if (t.rank() != 4 || t.dim(1) != 1) throw ShapeError("mat_from_gray: expected [B,1,H,W], got " + shape_str(t.shape()));
  const int H = t.dim(2), W = t.dim(3);
  cv::Mat mat(H, W, CV_8UC1);
  for (int y = 0; y < H; ++y) {
    auto* row = mat.ptr<unsigned char>(y);
    for (int x = 0; x < W; ++x) row[x] = to_u8(t.at(n, 0, y, x));
  }
  return mat;
}

// Gray Mat -> binary [1, 1, H, W] mask; values >= threshold become 1.
inline Tensor<float> mask_from_mat(const cv::Mat& mat, int threshold = 128) {
  if (mat.empty()) throw FormatError("empty mask");
  cv::Mat gray;
  if (mat.channels() == 3) {
    cv::cvtColor(mat, gray, cv::COLOR_BGR2GRAY);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, gray, cv::COLOR_BGRA2GRAY);
  } else {
    gray = mat;
  }
  if (gray.depth() != CV_8U) throw FormatError("only 8-bit masks are supported");
  Tensor<float> t({1, 1, gray.rows, gray.cols});
  for (int y = 0; y < gray.rows; ++y) {
    const auto* row = gray.ptr<unsigned char>(y);
    for (int x = 0; x < gray.cols; ++x) t.at(0, 0, y, x) = row[x] >= threshold ? 1.0f : 0.0f;
  }
  return t;
}

inline cv::Mat read_mat(const std::filesystem::path& path, int flags) {
  if (!std::filesystem::exists(path)) throw FormatError("missing file: " + path.string());
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw FormatError("corrupt or unreadable image: " + path.string());
  return m;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& mat) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw FormatError("failed to write " + path.string());
}

inline std::vector<unsigned char> encode_png(const cv::Mat& mat) {
  std::vector<unsigned char> buf;
  if (!cv::imencode(".png", mat, buf)) throw FormatError("PNG encoding failed");
  return buf;
}

inline cv::Mat decode_png(const std::vector<unsigned char>& bytes, int flags = cv::IMREAD_COLOR) {
  if (bytes.empty()) throw FormatError("empty image payload");
  cv::Mat m = cv::imdecode(bytes, flags);
  if (m.empty()) throw FormatError("could not decode image payload");
  return m;
}

inline cv::Mat resize_mat(const cv::Mat& m, int width, int height, int interpolation) {
  if (m.cols == width && m.rows == height) return m.clone();
  cv::Mat out;
  cv::resize(m, out, cv::Size(width, height), 0, 0, interpolation);
  return out;
}

// Bilinear resize of an image tensor [1, C, H, W] (float precision kept).
inline Tensor<float> resize_bilinear(const Tensor<float>& t, int width, int height) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("resize_bilinear: expected [1,C,H,W]");
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  if (H == height && W == width) return t;
  Tensor<float> out({1, C, height, width});
  for (int c = 0; c < C; ++c) {
    cv::Mat src(H, W, CV_32FC1, const_cast<float*>(t.data() + static_cast<std::size_t>(c) * H * W));
    cv::Mat dst(height, width, CV_32FC1, out.data() + static_cast<std::size_t>(c) * height * width);
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  }
  return out;
}

// Nearest-neighbour resize of a [1, 1, H, W] mask; stays binary.
inline Tensor<float> resize_nearest(const Tensor<float>& t, int width, int height) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("resize_nearest: expected [1,C,H,W]");
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  if (H == height && W == width) return t;
  Tensor<float> out({1, C, height, width});
  for (int c = 0; c < C; ++c) {
    cv::Mat src(H, W, CV_32FC1, const_cast<float*>(t.data() + static_cast<std::size_t>(c) * H * W));
    cv::Mat dst(height, width, CV_32FC1, out.data() + static_cast<std::size_t>(c) * height * width);
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  }
  return out;
}

// Lay equally sized BGR tiles out in a grid with a 2-pixel white gutter.
inline cv::Mat make_grid(const std::vector<cv::Mat>& tiles, int columns) {
  if (tiles.empty()) throw std::invalid_argument("make_grid: no tiles");
  const int th = tiles.front().rows, tw = tiles.front().cols, gap = 2;
  columns = std::max(1, std::min(columns, static_cast<int>(tiles.size())));
  const int rows = (static_cast<int>(tiles.size()) + columns - 1) / columns;
  cv::Mat grid(rows * th + (rows + 1) * gap, columns * tw + (columns + 1) * gap, CV_8UC3, cv::Scalar(255, 255, 255));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    cv::Mat tile = tiles[i];
    if (tile.channels() == 1) cv::cvtColor(tile, tile, cv::COLOR_GRAY2BGR);
    if (tile.rows != th || tile.cols != tw) tile = resize_mat(tile, tw, th, cv::INTER_NEAREST);
    const int r = static_cast<int>(i) / columns, c = static_cast<int>(i) % columns;
    tile.copyTo(grid(cv::Rect(gap + c * (tw + gap), gap + r * (th + gap), tw, th)));
  }
  return grid;
}

}  // namespace mcgan
