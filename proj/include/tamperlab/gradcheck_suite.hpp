#pragma once

// Finite-difference checks of every differentiable op and of the composed
// two-stream loss, in double precision.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tamperlab/detector.hpp"
#include "tamperlab/fusion.hpp"
#include "tamperlab/gradcheck.hpp"
#include "tamperlab/ops.hpp"

namespace tamperlab {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coordinates = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckSuiteOptions {
  double op_tolerance = 1e-4;
  double graph_tolerance = 1e-3;
  double op_epsilon = 1e-3;
  double graph_epsilon = 1e-5;
  std::size_t graph_coords = 16;  // per parameter tensor
  std::size_t graph_rois = 2;
  std::uint64_t seed = 7;
  bool include_graph = true;
};

namespace detail {

inline TensorPtr<double> gc_random(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1, bool grad = true) {
  auto t = make_tensor<double>(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t->data()) v = u(rng);
  t->set_requires_grad(grad);
  return t;
}

// Magnitudes in [margin, 1] with random sign, so kinks at 0 stay out of reach.
inline TensorPtr<double> gc_away_from_zero(Shape s, std::mt19937_64& rng, double margin) {
  auto t = gc_random(std::move(s), rng);
  for (auto& v : t->data()) v = (v < 0 ? -1 : 1) * (margin + (1 - margin) * std::abs(v));
  return t;
}

// Shuffled multiples of `spacing`: every max window has a unique, stable winner.
inline TensorPtr<double> gc_distinct(Shape s, std::mt19937_64& rng, double spacing = 0.01) {
  auto t = make_tensor<double>(std::move(s));
  auto d = t->data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = spacing * static_cast<double>(i) - 0.5;
  std::shuffle(d.begin(), d.end(), rng);
  t->set_requires_grad(true);
  return t;
}

// Weighted sum, so the scalar depends on every element of y.
inline TensorPtr<double> gc_project(BasicTape<double>& t, const TensorPtr<double>& y, std::mt19937_64& rng) {
  return sum(t, mul(t, y, gc_random(y->shape(), rng, -1, 1, false)));
}

struct GraphFixture {
  TwoStreamModel<double> model;
  TensorPtr<double> rgb, noise;
  AnchorAssignment assignment;
  RoiSample sample;
};

inline GraphFixture make_graph_fixture(ClassMode mode, FusionType fusion, std::uint64_t seed, std::size_t rois = 2) {
  DetectorConfig cfg;
  cfg.mode = mode;
  cfg.fusion = fusion;
  cfg.sketch_dim = 256;
  cfg.backbone.channels = {4, 4, 6, 6};
  cfg.backbone.input_side = 32;
  cfg.anchor_scales = {8, 16};
  cfg.anchor_ratios = {0.5, 1.0, 2.0};
  cfg.rpn_batch = 16;
  cfg.roi_batch = rois;
  cfg.hidden = 8;
  GraphFixture f;
  f.model = build_two_stream<double>(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  // Small random biases keep relu inputs away from exact zero.
  for (auto& p : f.model.parameters())
    if (p->rank() == 1)
      for (auto& v : p->data()) v = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  f.rgb = gc_random({3, 32, 32}, rng, -1, 1, false);
  f.noise = gc_random({3, 32, 32}, rng, -3, 3, false);
  const std::vector<Box> gt{{6, 5, 22, 19}};
  const std::vector<int> classes{mode == ClassMode::two_class ? 1 : 2};
  const auto anchors = generate_anchors(4, 4, 8, cfg.anchor_scales, cfg.anchor_ratios);
  AssignmentParams ap{cfg.iou_positive, cfg.iou_negative, cfg.rpn_batch, 0.5};
  f.assignment = assign_anchor_labels(anchors, gt, 32, 32, ap, rng);
  const std::vector<Box> proposals{{4, 4, 20, 20}, {0, 0, 16, 16}, {16, 16, 32, 32}, {8, 0, 30, 12}, {2, 18, 14, 30}};
  f.sample = sample_rois(proposals, gt, classes, cfg, rng);
  return f;
}

inline TensorPtr<double> graph_loss(BasicTape<double>& tape, const GraphFixture& f) {
  auto trunk = forward_trunk(tape, f.model, f.rgb, f.noise);
  auto rpn = rpn_loss(tape, trunk.rpn_cls, trunk.rpn_reg, f.assignment, f.model.config.lambda);
  auto heads = forward_heads(tape, f.model, pool_rois(tape, f.model, trunk, f.sample.rois));
  auto [tamper, bbox] = stage_losses(tape, heads, f.sample);
  return total_loss(tape, rpn.combined, tamper, bbox);
}

}  // namespace detail

/// Runs every check and returns one entry per op plus the composed graphs.
inline std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckSuiteOptions& opt = {}) {
  using detail::gc_away_from_zero;
  using detail::gc_distinct;
  using detail::gc_project;
  using detail::gc_random;
  using Build = std::function<TensorPtr<double>(BasicTape<double>&)>;
  std::vector<GradCheckEntry> out;
  std::mt19937_64 rng(opt.seed);
  auto check = [&](const std::string& name, const Build& build, const std::vector<TensorPtr<double>>& inputs) {
    const auto rep = finite_difference_report(build, inputs, opt.op_epsilon);
    out.push_back({name, rep.max_rel_error, opt.op_tolerance, rep.coordinates});
  };

  {
    auto x = gc_random({2, 7, 7}, rng), k = gc_random({3, 2, 3, 3}, rng), b = gc_random({3}, rng);
    check("conv2d stride 1 pad 1", [=](BasicTape<double>& t) { std::mt19937_64 g(1); return gc_project(t, conv2d(t, x, k, b, 1, 1), g); }, {x, k, b});
    check("conv2d stride 2 pad 0", [=](BasicTape<double>& t) { std::mt19937_64 g(2); return gc_project(t, conv2d(t, x, k, b, 2, 0), g); }, {x, k, b});
  }
  {
    auto x = gc_distinct({2, 6, 8}, rng);
    check("maxpool2d", [=](BasicTape<double>& t) { std::mt19937_64 r(3); return gc_project(t, maxpool2d(t, x), r); }, {x});
  }
  {
    auto x = gc_random({5}, rng), xb = gc_random({3, 5}, rng), w = gc_random({4, 5}, rng), b = gc_random({4}, rng);
    check("linear (vector)", [=](BasicTape<double>& t) { std::mt19937_64 r(4); return gc_project(t, linear(t, x, w, b), r); }, {x, w, b});
    check("linear (batch)", [=](BasicTape<double>& t) { std::mt19937_64 r(5); return gc_project(t, linear(t, xb, w, b), r); }, {xb, w, b});
  }
  {
    auto x = gc_away_from_zero({4, 6}, rng, 0.05);
    check("relu", [=](BasicTape<double>& t) { std::mt19937_64 r(6); return gc_project(t, relu(t, x), r); }, {x});
  }
  {
    auto z = gc_random({5, 4}, rng, -3, 3);
    const std::vector<int> labels{0, 3, 1, 2, 3};
    check("softmax_cross_entropy", [=](BasicTape<double>& t) { return softmax_cross_entropy(t, z, labels); }, {z});
  }
  {
    auto p = gc_random({3, 4}, rng, -3, 3);
    auto target = make_tensor<double>({3, 4});
    // keep |p - target| away from the quadratic/linear switch at 1
    for (auto& v : p->data())
      if (std::abs(std::abs(v) - 1) < 0.05) v += 0.1;
    check("smooth_l1_loss", [=](BasicTape<double>& t) { return smooth_l1_loss(t, p, target); }, {p});
  }
  {
    auto x = gc_away_from_zero({3, 10}, rng, 0.05);
    check("signed_sqrt_l2norm", [=](BasicTape<double>& t) { std::mt19937_64 r(7); return gc_project(t, signed_sqrt_l2norm(t, x), r); }, {x});
  }
  {
    auto a = gc_random({4, 3}, rng), b = gc_random({4, 3}, rng);
    check("add/mul/scale/reshape/leading_rows", [=](BasicTape<double>& t) {
      auto y = scale(t, add(t, mul(t, a, b), a), 0.7);
      auto r = leading_rows(t, reshape(t, y, {6, 2}), 4);
      std::mt19937_64 g(8);
      return gc_project(t, r, g);
    }, {a, b});
  }
  {
    auto m = gc_random({12, 3, 3}, rng);
    const std::vector<std::size_t> idx{0, 4, 9, 17, 26, 4};
    const std::vector<int> labels{0, 1, 1, 0, 1, 0};
    auto reg = gc_random({24, 3, 3}, rng);
    check("gather_anchor_channels", [=](BasicTape<double>& t) {
      auto ce = softmax_cross_entropy(t, gather_anchor_channels(t, m, 2, idx), labels);
      std::mt19937_64 g(9);
      return add(t, ce, gc_project(t, gather_anchor_channels(t, reg, 4, idx), g));
    }, {m, reg});
  }
  {
    auto f = gc_distinct({2, 9, 11}, rng, 0.005);
    const std::vector<Box> rois{{0, 0, 40, 36}, {10, 6, 70, 60}, {33, 20, 50, 30}, {4, 4, 12, 12}};
    check("roi_pool", [=](BasicTape<double>& t) { std::mt19937_64 g(10); return gc_project(t, roi_pool(t, f, rois, 8, 3), g); }, {f});
  }
  {
    // Positive features keep pooled entries clear of the signed-sqrt kink at 0.
    auto a = gc_random({2, 3, 3, 3}, rng, 0.2, 1), b = gc_random({2, 3, 3, 3}, rng, 0.2, 1);
    check("bilinear_pool", [=](BasicTape<double>& t) { std::mt19937_64 g(11); return gc_project(t, bilinear_pool(t, a, b), g); }, {a, b});
    check("bilinear_fuse", [=](BasicTape<double>& t) { std::mt19937_64 g(12); return gc_project(t, bilinear_fuse(t, a, b), g); }, {a, b});
    const auto sk = CountSketch::make(3, 64, 5);
    check("compact_bilinear_pool", [=](BasicTape<double>& t) { std::mt19937_64 g(13); return gc_project(t, compact_bilinear_pool(t, a, b, sk), g); }, {a, b});
    check("compact_bilinear_fuse", [=](BasicTape<double>& t) { std::mt19937_64 g(14); return gc_project(t, compact_bilinear_fuse(t, a, b, sk), g); }, {a, b});
  }

  if (opt.include_graph) {
    const struct {
      const char* name;
      ClassMode mode;
      FusionType fusion;
    } graphs[] = {{"two-stream loss (two-class, bilinear)", ClassMode::two_class, FusionType::bilinear},
                  {"two-stream loss (multi-class, compact)", ClassMode::multi_class, FusionType::compact}};
    for (const auto& g : graphs) {
      const auto fx = detail::make_graph_fixture(g.mode, g.fusion, opt.seed, opt.graph_rois);
      const auto rep = finite_difference_report([&](BasicTape<double>& t) { return detail::graph_loss(t, fx); },
                                                fx.model.parameters(), opt.graph_epsilon, opt.graph_coords);
      out.push_back({g.name, rep.max_rel_error, opt.graph_tolerance, rep.coordinates});
    }
  }
  return out;
}

}  // namespace tamperlab
