#pragma once

// Localization and detection metrics: per-image best-threshold F1 and AUC over
// rasterized box scores, COCO-style AP, and the manifest evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tamperlab/boxes.hpp"
#include "tamperlab/detector.hpp"
#include "tamperlab/parallel.hpp"
#include "tamperlab/synth.hpp"

namespace tamperlab {

struct PixelScoreMap {
  int width = 0;
  int height = 0;
  std::vector<double> scores;

  PixelScoreMap() = default;
  PixelScoreMap(int w, int h) : width(w), height(h), scores(static_cast<std::size_t>(w) * h, 0.0) {}
  double& at(int x, int y) { return scores[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return scores[static_cast<std::size_t>(y) * width + x]; }
};

/// A pixel takes the highest score among boxes containing its center; other pixels are 0.
inline PixelScoreMap rasterize_detections(const std::vector<Detection>& dets, int width, int height) {
  PixelScoreMap map(width, height);
  for (const auto& d : dets) {
    const Box b = clamp_box(d.box, width, height);
    const int x1 = static_cast<int>(std::ceil(b.x1 - 0.5)), x2 = static_cast<int>(std::ceil(b.x2 - 0.5));
    const int y1 = static_cast<int>(std::ceil(b.y1 - 0.5)), y2 = static_cast<int>(std::ceil(b.y2 - 0.5));
    for (int y = std::max(0, y1); y < std::min(height, y2); ++y)
      for (int x = std::max(0, x1); x < std::min(width, x2); ++x) map.at(x, y) = std::max(map.at(x, y), d.score);
  }
  return map;
}

struct F1Result {
  double f1 = 0;
  double threshold = 0;
};

/// Best F1 over thresholds {distinct scores} U {0}, predicting score >= t.
/// Ties keep the highest threshold. nullopt when the ground truth has no positives.
inline std::optional<F1Result> f1_best_threshold(const std::vector<double>& scores, const std::vector<std::uint8_t>& gt) {
  if (scores.size() != gt.size()) throw std::invalid_argument("f1: score map and mask sizes differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t positives = 0;
  for (auto g : gt) positives += g != 0;
  if (positives == 0) return std::nullopt;
  F1Result best{-1, 0};
  std::size_t tp = 0, fp = 0;
  auto consider = [&](double t) {
    const double f1 = 2.0 * tp / static_cast<double>(2 * tp + fp + (positives - tp));
    if (f1 > best.f1) best = {f1, t};
  };
  for (std::size_t k = 0; k < order.size();) {
    const double t = scores[order[k]];
    while (k < order.size() && scores[order[k]] == t) {
      (gt[order[k]] ? tp : fp) += 1;
      ++k;
    }
    if (t < 0) break;  // thresholds below 0 are not candidates
    consider(t);
  }
  if (scores.empty() || *std::min_element(scores.begin(), scores.end()) > 0) {
    tp = positives;
    fp = scores.size() - positives;
    consider(0);
  }
  return best;
}

inline std::optional<F1Result> f1_best_threshold(const PixelScoreMap& map, const Mask& gt) {
  if (map.width != gt.width || map.height != gt.height) throw std::invalid_argument("f1: score map and mask sizes differ");
  return f1_best_threshold(map.scores, gt.bits);
}

/// Mann-Whitney AUC with midranks for ties. nullopt when only one class is present.
inline std::optional<double> pixel_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& gt) {
  if (scores.size() != gt.size()) throw std::invalid_argument("auc: score map and mask sizes differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < order.size();) {
    std::size_t e = k;
    while (e < order.size() && scores[order[e]] == scores[order[k]]) ++e;
    const double midrank = (static_cast<double>(k + 1) + static_cast<double>(e)) / 2.0;
    for (std::size_t i = k; i < e; ++i)
      if (gt[order[i]]) {
        pos_rank_sum += midrank;
        ++pos;
      }
    k = e;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1) / 2.0) / (p * n);
}

inline std::optional<double> pixel_auc(const PixelScoreMap& map, const Mask& gt) {
  if (map.width != gt.width || map.height != gt.height) throw std::invalid_argument("auc: score map and mask sizes differ");
  return pixel_auc(map.scores, gt.bits);
}

// --- detection AP ---------------------------------------------------------------------------

struct GroundTruthBox {
  Box box;
  int label = 1;
};

struct ImageDetections {
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> ground_truth;
};

inline const std::vector<double>& coco_iou_thresholds() {
  static const std::vector<double> t{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  return t;
}

/// AP of one class at one IoU threshold: detections sorted by score (ties in
/// image, then detection order) are greedily matched to the unmatched ground
/// truth of highest IoU >= threshold in the same image; the precision envelope
/// is integrated over every recall step. nullopt when the class has no ground truth.
inline std::optional<double> average_precision(const std::vector<ImageDetections>& images, int label,
                                               double iou_threshold) {
  struct Ref {
    double score;
    std::size_t image, index;
  };
  std::vector<Ref> dets;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t k = 0; k < images[i].detections.size(); ++k)
      if (images[i].detections[k].label == label) dets.push_back({images[i].detections[k].score, i, k});
    for (const auto& g : images[i].ground_truth) n_gt += g.label == label;
  }
  if (n_gt == 0) return std::nullopt;
  std::stable_sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
  std::vector<std::vector<char>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(images[i].ground_truth.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : dets) {
    const Box& b = images[r.image].detections[r.index].box;
    const auto& gts = images[r.image].ground_truth;
    double best = -1;
    std::ptrdiff_t match = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].label != label || used[r.image][g]) continue;
      const double o = iou(b, gts[g].box);
      if (o >= iou_threshold && o > best) {
        best = o;
        match = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (match >= 0) {
      used[r.image][static_cast<std::size_t>(match)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct DetectionApReport {
  std::map<int, double> ap;    // mean over the COCO IoU thresholds
  std::map<int, double> ap50;  // IoU 0.5
  double mean_ap = 0;
  double mean_ap50 = 0;
};

/// Classes without ground truth are left out of the report and the means.
inline DetectionApReport detection_ap(const std::vector<ImageDetections>& images,
                                      const std::vector<double>& thresholds = coco_iou_thresholds()) {
  std::set<int> labels;
  for (const auto& im : images)
    for (const auto& g : im.ground_truth) labels.insert(g.label);
  DetectionApReport r;
  for (int label : labels) {
    double sum = 0;
    for (double t : thresholds) sum += *average_precision(images, label, t);
    r.ap[label] = thresholds.empty() ? 0.0 : sum / static_cast<double>(thresholds.size());
    r.ap50[label] = *average_precision(images, label, 0.5);
  }
  for (const auto& [label, v] : r.ap) r.mean_ap += v / static_cast<double>(r.ap.size());
  for (const auto& [label, v] : r.ap50) r.mean_ap50 += v / static_cast<double>(r.ap50.size());
  return r;
}

// --- manifest evaluation ----------------------------------------------------------------------

struct SubReport {
  std::string name;  // "clean" or the attack spec
  std::size_t samples = 0;
  std::size_t f1_images = 0;   // images with nonempty ground truth
  std::size_t auc_images = 0;  // images with both classes present
  double f1_best = 0;          // per-image mean
  double auc = 0;              // per-image mean
  std::map<std::string, double> ap_per_class;
  std::map<std::string, double> ap50_per_class;
  double mean_ap = 0;
  double mean_ap50 = 0;
};

struct MetricsReport {
  std::string mode;
  std::string split;
  std::vector<SubReport> reports;  // clean first, then one per attack in the given order
};

/// Per-image outcome used to assemble a sub-report.
struct ImageEvaluation {
  std::optional<F1Result> f1;
  std::optional<double> auc;
  ImageDetections detections;
};

inline ImageEvaluation evaluate_image(const Detector& model, const TamperSample& s) {
  ImageEvaluation e;
  e.detections.detections = detect(model, s.image);
  for (const auto& b : s.boxes) e.detections.ground_truth.push_back({b.box, class_id(model.config.mode, b.label)});
  const auto map = rasterize_detections(e.detections.detections, s.image.width, s.image.height);
  e.f1 = f1_best_threshold(map, s.mask);
  e.auc = pixel_auc(map, s.mask);
  return e;
}

inline SubReport summarize(const std::string& name, const std::vector<ImageEvaluation>& evals, ClassMode mode) {
  SubReport r;
  r.name = name;
  r.samples = evals.size();
  std::vector<ImageDetections> dets;
  for (const auto& e : evals) {
    if (e.f1) {
      r.f1_best += e.f1->f1;
      ++r.f1_images;
    }
    if (e.auc) {
      r.auc += *e.auc;
      ++r.auc_images;
    }
    dets.push_back(e.detections);
  }
  if (r.f1_images) r.f1_best /= static_cast<double>(r.f1_images);
  if (r.auc_images) r.auc /= static_cast<double>(r.auc_images);
  const auto ap = detection_ap(dets);
  const auto& names = class_names(mode);
  for (const auto& [label, v] : ap.ap) r.ap_per_class[names.at(static_cast<std::size_t>(label))] = v;
  for (const auto& [label, v] : ap.ap50) r.ap50_per_class[names.at(static_cast<std::size_t>(label))] = v;
  r.mean_ap = ap.mean_ap;
  r.mean_ap50 = ap.mean_ap50;
  return r;
}

/// Checks every box label against the model's class mode before any inference runs.
inline void check_manifest_mode(const std::vector<ManifestRecord>& records, ClassMode mode) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      for (const auto& b : records[i].boxes) class_id(mode, b.label);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("manifest record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
}

/// Detection on every record of `split` ("" for all), clean and under each attack.
inline MetricsReport evaluate_manifest(const Detector& model, const std::vector<ManifestRecord>& records,
                                       const std::filesystem::path& base_dir, const std::vector<AttackSpec>& attacks,
                                       const std::string& split = "test", std::size_t jobs = 1) {
  check_manifest_mode(records, model.config.mode);
  std::vector<const ManifestRecord*> chosen;
  for (const auto& r : records)
    if (split.empty() || r.split == split) chosen.push_back(&r);
  MetricsReport report;
  report.mode = to_string(model.config.mode);
  report.split = split.empty() ? "all" : split;
  const std::size_t variants = attacks.size() + 1;
  std::vector<std::vector<ImageEvaluation>> evals(variants, std::vector<ImageEvaluation>(chosen.size()));
  parallel_for(chosen.size(), jobs, [&](std::size_t i) {
    const TamperSample s = load_sample(*chosen[i], base_dir);
    evals[0][i] = evaluate_image(model, s);
    for (std::size_t a = 0; a < attacks.size(); ++a) evals[a + 1][i] = evaluate_image(model, attack(s, attacks[a]));
  });
  report.reports.push_back(summarize("clean", evals[0], model.config.mode));
  for (std::size_t a = 0; a < attacks.size(); ++a)
    report.reports.push_back(summarize(attacks[a].name(), evals[a + 1], model.config.mode));
  return report;
}

inline nlohmann::ordered_json to_json(const SubReport& r) {
  nlohmann::ordered_json j;
  j["name"] = r.name;
  j["samples"] = r.samples;
  j["f1_images"] = r.f1_images;
  j["auc_images"] = r.auc_images;
  j["f1_best"] = r.f1_best;
  j["auc"] = r.auc;
  j["ap_per_class"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.ap_per_class) j["ap_per_class"][k] = v;
  j["mean_ap"] = r.mean_ap;
  j["ap50_per_class"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.ap50_per_class) j["ap50_per_class"][k] = v;
  j["mean_ap50"] = r.mean_ap50;
  return j;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = r.mode;
  j["split"] = r.split;
  j["averaging"] = "per-image mean of best-threshold F1 and AUC; images without tampered pixels excluded";
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& s : r.reports) j["reports"].push_back(to_json(s));
  return j;
}

inline std::string report_text(const MetricsReport& r) { return to_json(r).dump(2) + "\n"; }

}  // namespace tamperlab
