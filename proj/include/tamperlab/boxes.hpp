#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace tamperlab {

/// Axis-aligned box in continuous pixel coordinates; width = x2 - x1.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return x1 + 0.5 * width(); }
  double cy() const { return y1 + 0.5 * height(); }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; zero for disjoint or degenerate boxes.
inline double iou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  if (aa <= 0 || ab <= 0) return 0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0;
  const double inter = iw * ih;
  return inter / (aa + ab - inter);
}

using BoxDeltas = std::array<double, 4>;

/// ((cx* - cx)/w, (cy* - cy)/h, ln(w*/w), ln(h*/h)).
inline BoxDeltas encode_box_deltas(const Box& proposal, const Box& gt) {
  if (proposal.width() <= 0 || proposal.height() <= 0 || gt.width() <= 0 || gt.height() <= 0)
    throw std::invalid_argument("encode_box_deltas: boxes must have positive width and height");
  return {(gt.cx() - proposal.cx()) / proposal.width(), (gt.cy() - proposal.cy()) / proposal.height(),
          std::log(gt.width() / proposal.width()), std::log(gt.height() / proposal.height())};
}

/// Exact inverse of encode_box_deltas; no clamping.
inline Box decode_box_deltas(const Box& proposal, const BoxDeltas& d) {
  if (proposal.width() <= 0 || proposal.height() <= 0)
    throw std::invalid_argument("decode_box_deltas: proposal must have positive width and height");
  const double cx = proposal.cx() + d[0] * proposal.width();
  const double cy = proposal.cy() + d[1] * proposal.height();
  const double w = proposal.width() * std::exp(d[2]);
  const double h = proposal.height() * std::exp(d[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline Box clamp_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

/// Moves every side outward by `pad`, clamped to the image.
inline Box enlarge_box(const Box& b, double pad, double width, double height) {
  return clamp_box({b.x1 - pad, b.y1 - pad, b.x2 + pad, b.y2 + pad}, width, height);
}

/// Greedy suppression; returns kept indices in descending score order.
/// Equal scores are ordered by lower index.
inline std::vector<std::size_t> nms_indices(const std::vector<Box>& boxes,
                                            const std::vector<double>& scores, double iou_threshold,
                                            std::size_t max_keep = 0) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes/scores length mismatch");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    if (max_keep && keep.size() >= max_keep) break;
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

struct Detection {
  Box box;
  int label = 1;
  double score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold = 0.2) {
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    scores.push_back(d.score);
  }
  std::vector<Detection> kept;
  for (std::size_t i : nms_indices(boxes, scores, iou_threshold)) kept.push_back(dets[i]);
  return kept;
}

}  // namespace tamperlab
