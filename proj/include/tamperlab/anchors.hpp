#pragma once

// Anchor tiling and RPN training-target assignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "tamperlab/boxes.hpp"

namespace tamperlab {

struct AnchorSet {
  std::vector<Box> boxes;
  std::size_t feature_h = 0;
  std::size_t feature_w = 0;
  std::size_t per_location = 0;
  std::size_t stride = 0;

  std::size_t size() const { return boxes.size(); }
};

/// Anchors are centered at ((x + 0.5) * stride, (y + 0.5) * stride). Scale s and
/// ratio r = h:w give h = s * sqrt(r), w = s / sqrt(r), so h * w = s^2.
/// Index = (y * feature_w + x) * per_location + scale_index * ratios + ratio_index.
inline AnchorSet generate_anchors(std::size_t feature_h, std::size_t feature_w, std::size_t stride,
                                  const std::vector<double>& scales, const std::vector<double>& ratios) {
  if (scales.empty() || ratios.empty()) throw std::invalid_argument("generate_anchors: no scales or ratios");
  AnchorSet set;
  set.feature_h = feature_h;
  set.feature_w = feature_w;
  set.per_location = scales.size() * ratios.size();
  set.stride = stride;
  set.boxes.reserve(feature_h * feature_w * set.per_location);
  for (std::size_t y = 0; y < feature_h; ++y)
    for (std::size_t x = 0; x < feature_w; ++x) {
      const double cx = (x + 0.5) * static_cast<double>(stride);
      const double cy = (y + 0.5) * static_cast<double>(stride);
      for (double s : scales)
        for (double r : ratios) {
          const double h = s * std::sqrt(r), w = s / std::sqrt(r);
          set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
    }
  return set;
}

enum class AnchorLabel : std::int8_t { ignore = -1, negative = 0, positive = 1 };

/// Per-anchor labels g*, regression targets f* for positives, and the sampled mini-batch.
struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<BoxDeltas> targets;      // meaningful for positives only
  std::vector<int> matched_gt;         // -1 where no ground truth matched
  std::vector<std::size_t> sampled;    // mini-batch of size N_cls
  std::size_t num_anchors = 0;         // N_reg

  std::size_t batch_size() const { return sampled.size(); }
  std::vector<std::size_t> sampled_positives() const {
    std::vector<std::size_t> out;
    for (std::size_t i : sampled)
      if (labels[i] == AnchorLabel::positive) out.push_back(i);
    return out;
  }
};

struct AssignmentParams {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  std::size_t batch_size = 64;
  double max_positive_fraction = 0.5;
};

/// Anchors crossing the image border are ignored. Every ground truth's best
/// anchor (ties included) is forced positive. Positives are sampled up to half
/// the batch, the rest is filled with negatives.
template <typename Rng>
AnchorAssignment assign_anchor_labels(const AnchorSet& anchors, const std::vector<Box>& gt_boxes,
                                      double image_w, double image_h, const AssignmentParams& params,
                                      Rng& rng) {
  const std::size_t n = anchors.size();
  AnchorAssignment out;
  out.num_anchors = n;
  out.labels.assign(n, AnchorLabel::ignore);
  out.targets.assign(n, BoxDeltas{0, 0, 0, 0});
  out.matched_gt.assign(n, -1);

  std::vector<char> inside(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Box& a = anchors.boxes[i];
    inside[i] = a.x1 >= 0 && a.y1 >= 0 && a.x2 <= image_w && a.y2 <= image_h;
  }

  std::vector<double> max_iou(n, 0.0);
  std::vector<double> gt_best(gt_boxes.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!inside[i]) continue;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors.boxes[i], gt_boxes[g]);
      if (out.matched_gt[i] < 0 || v > max_iou[i]) {
        max_iou[i] = v;
        out.matched_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!inside[i]) continue;
    if (gt_boxes.empty() || max_iou[i] <= params.negative_iou) out.labels[i] = AnchorLabel::negative;
    if (!gt_boxes.empty() && max_iou[i] >= params.positive_iou) out.labels[i] = AnchorLabel::positive;
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best[g] <= 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (!inside[i]) continue;
      if (iou(anchors.boxes[i], gt_boxes[g]) == gt_best[g]) {
        out.labels[i] = AnchorLabel::positive;
        out.matched_gt[i] = static_cast<int>(g);
      }
    }
  }

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] == AnchorLabel::positive) {
      pos.push_back(i);
      out.targets[i] = encode_box_deltas(anchors.boxes[i], gt_boxes[out.matched_gt[i]]);
    } else if (out.labels[i] == AnchorLabel::negative) {
      neg.push_back(i);
    }
  }
  if (neg.empty())
    throw std::runtime_error("assign_anchor_labels: no valid negative anchors (degenerate image)");

  const auto max_pos = static_cast<std::size_t>(params.batch_size * params.max_positive_fraction);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const std::size_t n_pos = std::min(pos.size(), max_pos);
  const std::size_t n_neg = std::min(neg.size(), params.batch_size - n_pos);
  out.sampled.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
  out.sampled.insert(out.sampled.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
  std::sort(out.sampled.begin(), out.sampled.end());
  return out;
}

}  // namespace tamperlab
