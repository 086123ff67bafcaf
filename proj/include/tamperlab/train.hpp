#pragma once

// Single-image SGD training of a detector.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tamperlab/detector.hpp"
#include "tamperlab/optim.hpp"

namespace tamperlab {

/// One training image with boxes in its own pixel coordinates.
struct TrainingImage {
  Image image;
  std::vector<Box> boxes;
  std::vector<int> classes;
};

/// Stream inputs and enlarged, resized ground truth for one orientation.
struct PreparedTarget {
  TensorPtr<float> rgb, noise;
  ImageTargets targets;
};

struct PreparedSample {
  PreparedTarget plain, flipped;
};

inline PreparedTarget prepare_target(const Image& image, const std::vector<Box>& boxes,
                                     const std::vector<int>& classes, const DetectorConfig& cfg) {
  auto prep = prepare_image(image, cfg.backbone);
  PreparedTarget t;
  t.rgb = std::make_shared<Tensor>(std::move(prep.rgb));
  t.noise = std::make_shared<Tensor>(std::move(prep.noise));
  const double w = prep.image.width, h = prep.image.height;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    const Box r{b.x1 * prep.scale_x, b.y1 * prep.scale_y, b.x2 * prep.scale_x, b.y2 * prep.scale_y};
    t.targets.boxes.push_back(enlarge_box(r, cfg.enlarge_pad, w, h));
    t.targets.classes.push_back(classes[i]);
  }
  return t;
}

inline PreparedSample prepare_sample(const TrainingImage& s, const DetectorConfig& cfg) {
  if (s.boxes.size() != s.classes.size()) throw std::invalid_argument("training image: boxes/classes mismatch");
  PreparedSample p;
  p.plain = prepare_target(s.image, s.boxes, s.classes, cfg);
  std::vector<Box> fb;
  const double w = s.image.width;
  for (const Box& b : s.boxes) fb.push_back({w - b.x2, b.y1, w - b.x1, b.y2});
  p.flipped = prepare_target(flip_horizontal(s.image), fb, s.classes, cfg);
  return p;
}

struct TrainConfig {
  long steps = 2000;
  SgdConfig sgd{0.001, 800, 0.0001, 0.9};
  std::uint64_t seed = 0;
  bool flip = true;  // random horizontal flip per step
  double fused_cls_lr_mult = 1;  // learning-rate multiplier for the class layer on the fused vector
};

/// step, l_rpn_cls, l_rpn_reg, l_tamper, l_bbox, l_total, lr
using StepCallback = std::function<void(long, const LossBreakdown&, double)>;

inline void write_loss_csv_header(std::ostream& os) { os << "step,l_rpn_cls,l_rpn_reg,l_tamper,l_bbox,l_total,lr\n"; }

inline void write_loss_csv_row(std::ostream& os, long step, const LossBreakdown& l, double lr) {
  os << step << std::setprecision(9) << ',' << l.l_rpn_cls << ',' << l.l_rpn_reg << ',' << l.l_tamper << ','
     << l.l_bbox << ',' << l.l_total << ',' << lr << '\n';
}

/// Visits the samples in reshuffled epochs, one image per step. Deterministic
/// for a fixed seed.
inline std::vector<LossBreakdown> train_detector(Detector& model, const std::vector<PreparedSample>& samples,
                                                 const TrainConfig& cfg, const StepCallback& on_step = {}) {
  if (samples.empty()) throw std::invalid_argument("train: no training samples");
  std::vector<TensorPtr<float>> params;
  std::vector<double> scale;
  const bool fused = model.config.streams == StreamMode::two_stream;
  for (const auto& [name, p] : model.named_parameters()) {
    params.push_back(p);
    scale.push_back(fused && name.rfind("head.cls.", 0) == 0 ? cfg.fused_cls_lr_mult : 1.0);
  }
  Sgd<float> opt(params, cfg.sgd, scale);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<LossBreakdown> history;
  history.reserve(static_cast<std::size_t>(cfg.steps));
  std::bernoulli_distribution coin(0.5);
  for (long step = 0; step < cfg.steps; ++step) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto& s = samples[order[cursor++]];
    const auto& t = cfg.flip && coin(rng) ? s.flipped : s.plain;
    Tape tape;
    zero_grad(model.parameters());
    auto losses = compute_losses(tape, model, t.rgb, t.noise, t.targets, rng);
    backward_pass(tape, losses.total);
    const auto br = losses.breakdown(model.config.lambda);
    if (!std::isfinite(br.l_total)) throw std::runtime_error("train: loss is not finite at step " + std::to_string(step));
    const double lr = cfg.sgd.rate_at(step);
    opt.step(step);
    history.push_back(br);
    if (on_step) on_step(step, br, lr);
  }
  return history;
}

}  // namespace tamperlab
