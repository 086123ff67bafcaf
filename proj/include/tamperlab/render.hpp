#pragma once

// Detection overlays and pixel-score heatmaps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "tamperlab/boxes.hpp"
#include "tamperlab/detector.hpp"
#include "tamperlab/image.hpp"
#include "tamperlab/metrics.hpp"

namespace tamperlab {

using Rgb = std::array<std::uint8_t, 3>;

/// splice red, copy_move green, removal blue; the two-class "tampered" label is red.
inline Rgb class_color(ClassMode mode, int label) {
  if (mode == ClassMode::two_class) return {255, 0, 0};
  switch (label) {
    case 1: return {255, 0, 0};
    case 2: return {0, 255, 0};
    case 3: return {0, 0, 255};
    default: return {255, 255, 0};
  }
}

struct OverlayOptions {
  int line_width = 2;
  bool label_scores = true;  // score text above each box
  int dash = 3;              // on/off run length of the ground-truth outline
};

/// Pixels whose centers lie in the box, as an inclusive rectangle clipped to the image.
struct PixelRect {
  int x1 = 0, y1 = 0, x2 = -1, y2 = -1;
  bool empty() const { return x2 < x1 || y2 < y1; }
};

inline PixelRect pixel_rect(const Box& b, int width, int height) {
  PixelRect r{static_cast<int>(std::ceil(b.x1 - 0.5)), static_cast<int>(std::ceil(b.y1 - 0.5)),
              static_cast<int>(std::ceil(b.x2 - 0.5)) - 1, static_cast<int>(std::ceil(b.y2 - 0.5)) - 1};
  r.x1 = std::max(r.x1, 0);
  r.y1 = std::max(r.y1, 0);
  r.x2 = std::min(r.x2, width - 1);
  r.y2 = std::min(r.y2, height - 1);
  return r;
}

/// True when (x, y) lies in the band of the given width along the rectangle's inner edge.
inline bool in_perimeter_band(const PixelRect& r, int x, int y, int band) {
  if (x < r.x1 || x > r.x2 || y < r.y1 || y > r.y2) return false;
  return std::min({x - r.x1, r.x2 - x, y - r.y1, r.y2 - y}) < band;
}

namespace detail {

inline void put(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int k = 0; k < 3; ++k) img.at(x, y, k) = c[k];
}

// 3x5 glyphs, one row per entry, bit 2 is the left column.
inline const std::array<std::uint8_t, 5>& glyph(char ch) {
  static const std::array<std::array<std::uint8_t, 5>, 12> font{{
      {7, 5, 5, 5, 7},  // 0
      {2, 6, 2, 2, 7},  // 1
      {7, 1, 7, 4, 7},  // 2
      {7, 1, 7, 1, 7},  // 3
      {5, 5, 7, 1, 1},  // 4
      {7, 4, 7, 1, 7},  // 5
      {7, 4, 7, 5, 7},  // 6
      {7, 1, 1, 1, 1},  // 7
      {7, 5, 7, 5, 7},  // 8
      {7, 5, 7, 1, 7},  // 9
      {0, 0, 0, 0, 2},  // .
      {0, 0, 0, 0, 0},  // anything else
  }};
  if (ch >= '0' && ch <= '9') return font[static_cast<std::size_t>(ch - '0')];
  return font[ch == '.' ? 10 : 11];
}

}  // namespace detail

/// Draws `text` (digits and '.') with its top-left corner at (x, y); 4 px per character.
inline void draw_text(Image& img, int x, int y, const std::string& text, const Rgb& color) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto& g = detail::glyph(text[i]);
    for (int row = 0; row < 5; ++row)
      for (int col = 0; col < 3; ++col)
        if (g[static_cast<std::size_t>(row)] & (4 >> col)) detail::put(img, x + static_cast<int>(i) * 4 + col, y + row, color);
  }
}

inline void draw_box(Image& img, const Box& b, const Rgb& color, int line_width) {
  const PixelRect r = pixel_rect(b, img.width, img.height);
  if (r.empty()) return;
  for (int y = r.y1; y <= r.y2; ++y)
    for (int x = r.x1; x <= r.x2; ++x)
      if (in_perimeter_band(r, x, y, line_width)) detail::put(img, x, y, color);
}

/// One-pixel white outline, `dash` pixels on then `dash` off, walking clockwise from the top-left corner.
inline void draw_dashed_box(Image& img, const Box& b, int dash) {
  const PixelRect r = pixel_rect(b, img.width, img.height);
  if (r.empty()) return;
  std::vector<std::pair<int, int>> path;
  for (int x = r.x1; x <= r.x2; ++x) path.push_back({x, r.y1});
  for (int y = r.y1 + 1; y <= r.y2; ++y) path.push_back({r.x2, y});
  if (r.y2 > r.y1)
    for (int x = r.x2 - 1; x >= r.x1; --x) path.push_back({x, r.y2});
  if (r.x2 > r.x1)
    for (int y = r.y2 - 1; y > r.y1; --y) path.push_back({r.x1, y});
  const int period = std::max(1, dash);
  for (std::size_t i = 0; i < path.size(); ++i)
    if ((static_cast<int>(i) / period) % 2 == 0) detail::put(img, path[i].first, path[i].second, {255, 255, 255});
}

inline std::string score_label(double score) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", score);
  return buf;
}

/// Ground truth dashed white, then detections from lowest to highest score so
/// the strongest box ends on top.
inline Image render_overlay(const Image& image, const std::vector<Detection>& detections, ClassMode mode,
                            const std::vector<Box>& ground_truth = {}, const OverlayOptions& opt = {}) {
  Image out = image;
  for (const Box& g : ground_truth) draw_dashed_box(out, g, opt.dash);
  std::vector<Detection> dets = detections;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score < b.score; });
  for (const auto& d : dets) {
    const Rgb c = class_color(mode, d.label);
    draw_box(out, d.box, c, opt.line_width);
    if (!opt.label_scores) continue;
    const PixelRect r = pixel_rect(d.box, out.width, out.height);
    if (r.empty()) continue;
    const int ty = r.y1 >= 7 ? r.y1 - 7 : r.y1 + opt.line_width + 1;
    draw_text(out, r.x1 + (r.y1 >= 7 ? 0 : opt.line_width + 1), ty, score_label(d.score), c);
  }
  return out;
}

/// Red tint with opacity alpha * score per pixel.
inline Image render_heatmap(const Image& image, const PixelScoreMap& scores, double alpha = 0.6) {
  if (scores.width != image.width || scores.height != image.height)
    throw std::invalid_argument("heatmap: score map does not match the image size");
  Image out = image;
  const Rgb tint{255, 0, 0};
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double a = alpha * std::clamp(scores.at(x, y), 0.0, 1.0);
      for (int k = 0; k < 3; ++k)
        out.at(x, y, k) = static_cast<std::uint8_t>(std::lround((1 - a) * image.at(x, y, k) + a * tint[k]));
    }
  return out;
}

inline void write_overlay(const std::string& path, const Image& image, const std::vector<Detection>& detections,
                          ClassMode mode, const std::vector<Box>& ground_truth = {}, const OverlayOptions& opt = {}) {
  write_png(path, render_overlay(image, detections, mode, ground_truth, opt));
}

}  // namespace tamperlab
