#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "tamperlab/detector.hpp"
#include "tamperlab/gradcheck_suite.hpp"
#include "tamperlab/train.hpp"

using namespace tamperlab;

namespace {

DetectorConfig small_config(ClassMode mode = ClassMode::two_class) {
  DetectorConfig c;
  c.mode = mode;
  c.backbone.channels = {4, 8, 8};
  c.backbone.input_side = 64;
  c.hidden = 16;
  return c;
}

Image textured_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image img(w, h);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

// 8x8 feature map with 12 anchors per location: 768 anchors.
AnchorSet grid_anchors() { return generate_anchors(8, 8, 8, {8, 16, 32, 64}, {0.5, 1, 2}); }

AnchorAssignment sampled_only(std::size_t n, std::vector<std::size_t> sampled) {
  AnchorAssignment a;
  a.num_anchors = n;
  a.labels.assign(n, AnchorLabel::ignore);
  a.targets.assign(n, BoxDeltas{0, 0, 0, 0});
  a.matched_gt.assign(n, -1);
  for (std::size_t i : sampled) a.labels[i] = AnchorLabel::negative;
  a.sampled = std::move(sampled);
  return a;
}

}  // namespace

TEST(Model, ClassifierWidthFollowsMode) {
  EXPECT_EQ(build_two_stream(small_config(ClassMode::two_class), 1).cls_head.weight->dim(0), 2u);
  EXPECT_EQ(build_two_stream(small_config(ClassMode::multi_class), 1).cls_head.weight->dim(0), 4u);
  EXPECT_EQ(class_names(ClassMode::multi_class).size(), 4u);
  EXPECT_EQ(class_id(ClassMode::multi_class, "copy_move"), 2);
  EXPECT_EQ(class_id(ClassMode::two_class, "splice"), 1);
  EXPECT_THROW(class_id(ClassMode::multi_class, "tampered"), std::invalid_argument);
  EXPECT_THROW(class_id(ClassMode::two_class, "background"), std::invalid_argument);
}

TEST(Model, FreshModelOnZeroImageIsFinite) {
  for (auto streams : {StreamMode::two_stream, StreamMode::rgb_only, StreamMode::noise_only}) {
    auto cfg = small_config(ClassMode::multi_class);
    cfg.streams = streams;
    const auto m = build_two_stream(cfg, 2);
    Tape tape;
    auto rgb = make_tensor<float>({3, 64, 64}), noise = make_tensor<float>({3, 64, 64});
    auto trunk = forward_trunk(tape, m, rgb, noise);
    for (float v : trunk.rpn_cls->data()) EXPECT_TRUE(std::isfinite(v));
    const std::vector<Box> rois{{0, 0, 32, 32}, {10, 10, 60, 40}};
    auto heads = forward_heads(tape, m, pool_rois(tape, m, trunk, rois));
    EXPECT_EQ(heads.cls_logits->shape(), (Shape{2, 4}));
    for (float v : heads.cls_logits->data()) EXPECT_TRUE(std::isfinite(v));
    for (float v : heads.box_deltas->data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Model, BuildIsDeterministicPerSeed) {
  const auto a = build_two_stream(small_config(), 3), b = build_two_stream(small_config(), 3),
             c = build_two_stream(small_config(), 4);
  EXPECT_EQ(a.hidden.weight->values(), b.hidden.weight->values());
  EXPECT_NE(a.hidden.weight->values(), c.hidden.weight->values());
}

TEST(Config, Validation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.backbone.input_side = 66;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.fusion = FusionType::compact;
  c.sketch_dim = 1000;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.iou_negative = 0.8;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  EXPECT_EQ(c.resolved_fusion(), FusionType::bilinear);
  c.backbone.channels = {4, 256};
  EXPECT_EQ(c.resolved_fusion(), FusionType::compact);
}

TEST(RoiPool, ExactSevenBySevenRegionIsCopied) {
  std::mt19937_64 rng(5);
  Tape tape;
  auto f = make_tensor<float>({2, 7, 7});
  for (auto& v : f->data()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  const auto p = roi_pool(tape, f, {{0, 0, 56, 56}}, 8, 7);
  EXPECT_EQ(p->values(), f->values());
}

TEST(RoiPool, ConstantMapGivesConstantOutput) {
  Tape tape;
  auto f = make_tensor<float>({3, 9, 9}, 2.5f);
  const auto p = roi_pool(tape, f, {{3, 5, 50, 41}, {0, 0, 9, 9}, {60, 60, 72, 72}}, 8, 7);
  for (float v : p->data()) EXPECT_EQ(v, 2.5f);
}

TEST(RoiPool, MatchesBinScanOracle) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 40; ++t) {
    const std::size_t c = 2, h = 12, w = 10;
    const auto vals = oracle::random_values<double>(c * h * w, rng);
    Tape tape;
    auto f = make_tensor<float>({c, h, w});
    for (std::size_t i = 0; i < vals.size(); ++i) (*f)[i] = static_cast<float>(vals[i]);
    std::uniform_real_distribution<double> u(0, 80);
    double x1 = u(rng), y1 = u(rng), x2 = u(rng), y2 = u(rng);
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    const auto p = roi_pool(tape, f, {{x1, y1, x2 + 1, y2 + 1}}, 8, 7);
    std::vector<double> fd(f->data().begin(), f->data().end());
    const auto want = oracle::roi_pool(fd, c, h, w, {x1, y1, x2 + 1, y2 + 1}, 8, 7);
    ASSERT_EQ(p->size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ((*p)[i], static_cast<float>(want[i])) << t << " " << i;
  }
}

TEST(RpnLoss, UniformScoresWithoutPositivesGiveLn2) {
  const auto anchors = grid_anchors();
  std::vector<std::size_t> sampled;
  for (std::size_t i = 0; i < 64; ++i) sampled.push_back(i * 12);
  const auto a = sampled_only(anchors.size(), sampled);
  BasicTape<double> tape;
  auto cls = make_tensor<double>({24, 8, 8}), reg = make_tensor<double>({48, 8, 8});
  const auto l = rpn_loss(tape, cls, reg, a, 10);
  EXPECT_NEAR(l.cls->item(), std::log(2.0), 1e-12);
  EXPECT_EQ(l.reg->item(), 0.0);
}

TEST(RpnLoss, SinglePositiveRegressionTerm) {
  const auto anchors = grid_anchors();
  auto a = sampled_only(anchors.size(), {5, 100, 300});
  a.labels[100] = AnchorLabel::positive;
  a.targets[100] = {0.5, 0.5, 0.5, 0.5};
  BasicTape<double> tape;
  auto cls = make_tensor<double>({24, 8, 8}), reg = make_tensor<double>({48, 8, 8});
  const auto l = rpn_loss(tape, cls, reg, a, 10);
  EXPECT_EQ(a.num_anchors, 768u);
  EXPECT_NEAR(l.reg->item(), 10.0 * (4 * 0.125) / 768.0, 1e-12);
  EXPECT_NEAR(l.combined->item(), std::log(2.0) + 10.0 * 0.5 / 768.0, 1e-12);
}

TEST(RpnLoss, PerfectPredictionGivesZero) {
  const auto anchors = grid_anchors();
  auto a = sampled_only(anchors.size(), {7, 200, 401});
  a.labels[200] = AnchorLabel::positive;
  a.targets[200] = {0.1, -0.2, 0.3, 0.05};
  BasicTape<double> tape;
  auto cls = make_tensor<double>({24, 8, 8}), reg = make_tensor<double>({48, 8, 8});
  const std::size_t hw = 64;
  for (std::size_t i : a.sampled) {
    const std::size_t loc = i / 12, k = i % 12;
    const bool pos = a.labels[i] == AnchorLabel::positive;
    (*cls)[(2 * k) * hw + loc] = pos ? -60 : 60;
    (*cls)[(2 * k + 1) * hw + loc] = pos ? 60 : -60;
    if (pos)
      for (std::size_t j = 0; j < 4; ++j) (*reg)[(4 * k + j) * hw + loc] = a.targets[i][j];
  }
  EXPECT_NEAR(rpn_loss(tape, cls, reg, a, 10).combined->item(), 0.0, 1e-12);
}

TEST(TotalLoss, SumsComponents) {
  BasicTape<double> tape;
  auto r = make_tensor<double>({1}, 1.0), t = make_tensor<double>({1}, 0.5), b = make_tensor<double>({1}, 0.25);
  EXPECT_DOUBLE_EQ(total_loss(tape, r, t, b)->item(), 1.75);
  auto z = make_tensor<double>({1});
  EXPECT_DOUBLE_EQ(total_loss(tape, z, z, z)->item(), 0.0);
  EXPECT_DOUBLE_EQ(LossBreakdown::from_components(1, 0.5, 0.25, 0).l_total, 1.75);
}

TEST(SampleRois, ForegroundLeadsAndRespectsFraction) {
  DetectorConfig cfg;
  cfg.roi_batch = 8;
  std::mt19937_64 rng(7);
  const std::vector<Box> gt{{10, 10, 40, 40}};
  std::vector<Box> props{{11, 11, 41, 41}, {12, 10, 40, 42}, {10, 9, 39, 40}, {60, 60, 90, 90}, {0, 70, 30, 100}};
  const auto s = sample_rois(props, gt, {1}, cfg, rng);
  EXPECT_EQ(s.foreground.size(), 2u);  // lround(8 * 0.25)
  for (std::size_t i = 0; i < s.foreground.size(); ++i) {
    EXPECT_EQ(s.foreground[i], i);
    EXPECT_EQ(s.labels[i], 1);
    EXPECT_GE(iou(s.rois[i], gt[0]), 0.5);
  }
  for (std::size_t i = s.foreground.size(); i < s.rois.size(); ++i) EXPECT_EQ(s.labels[i], 0);
  EXPECT_EQ(s.rois.size(), 4u);
}

TEST(ProposeRois, TestPhaseCapsAt300) {
  DetectorConfig cfg;
  cfg.rpn_nms = 0.95;
  const auto anchors = generate_anchors(16, 16, 8, cfg.anchor_scales, cfg.anchor_ratios);
  std::mt19937_64 rng(8);
  Tensor cls({24, 16, 16}), reg({48, 16, 16});
  for (auto& v : cls.data()) v = std::uniform_real_distribution<float>(-2, 2)(rng);
  for (auto& v : reg.data()) v = std::uniform_real_distribution<float>(-0.3f, 0.3f)(rng);
  const auto p = propose_rois(cls, reg, anchors, 128, 128, Phase::test, cfg);
  EXPECT_EQ(p.boxes.size(), 300u);
  const auto q = propose_rois(cls, reg, anchors, 128, 128, Phase::train, cfg);
  EXPECT_EQ(q.boxes.size(), cfg.proposals_train);
  for (std::size_t i = 1; i < p.scores.size(); ++i) EXPECT_GE(p.scores[i - 1], p.scores[i]);
}

TEST(ProposeRois, EqualScoresGiveDeterministicPrefix) {
  DetectorConfig cfg;
  const auto anchors = grid_anchors();
  Tensor cls({24, 8, 8}), reg({48, 8, 8});
  const auto a = propose_rois(cls, reg, anchors, 64, 64, Phase::test, cfg);
  const auto b = propose_rois(cls, reg, anchors, 64, 64, Phase::test, cfg);
  ASSERT_FALSE(a.boxes.empty());
  EXPECT_EQ(a.boxes, b.boxes);
  // First surviving anchor in index order wins the tie.
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box c = clamp_box(anchors.boxes[i], 64, 64);
    if (c.width() >= cfg.min_proposal_side && c.height() >= cfg.min_proposal_side) {
      EXPECT_EQ(a.boxes[0], c);
      break;
    }
  }
}

TEST(ProposeRois, TopScoredAnchorRanksFirst) {
  DetectorConfig cfg;
  const auto anchors = grid_anchors();
  Tensor cls({24, 8, 8}), reg({48, 8, 8});
  const std::size_t idx = (3 * 8 + 4) * 12 + 4;  // location (4, 3), scale 16, ratio 1
  cls[(2 * 4 + 1) * 64 + 3 * 8 + 4] = 20;
  const auto p = propose_rois(cls, reg, anchors, 64, 64, Phase::test, cfg);
  EXPECT_EQ(p.boxes[0], anchors.boxes[idx]);
  EXPECT_GT(p.scores[0], 0.99);
}

TEST(Detect, SmokeAndDeterminism) {
  const auto m = build_two_stream(small_config(ClassMode::multi_class), 9);
  const Image blank(80, 64, 200);
  const auto d = detect(m, blank);
  for (const auto& x : d) {
    EXPECT_TRUE(std::isfinite(x.score));
    EXPECT_GE(x.box.x1, 0);
    EXPECT_LE(x.box.x2, 80);
  }
  const Image img = textured_image(64, 64, 10);
  EXPECT_EQ(detect(m, img), detect(m, img));
}

TEST(Checkpoint, RoundTripGivesIdenticalDetections) {
  for (auto fusion : {FusionType::bilinear, FusionType::compact}) {
    auto cfg = small_config(ClassMode::multi_class);
    cfg.fusion = fusion;
    cfg.sketch_dim = 512;
    cfg.score_floor = 0.0;
    const auto m = build_two_stream(cfg, 11);
    const auto path = std::filesystem::temp_directory_path() / ("tamperlab_det_" + to_string(fusion) + ".ckpt");
    save_detector(path.string(), m);
    DetectorConfig base;
    base.score_floor = 0.0;
    const auto back = load_detector(path.string(), base);
    EXPECT_EQ(back.config.resolved_fusion(), fusion);
    EXPECT_EQ(back.config.backbone.channels, cfg.backbone.channels);
    const Image img = textured_image(64, 64, 12);
    const auto a = detect(m, img), b = detect(back, img);
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b);
    std::filesystem::remove(path);
  }
}

TEST(Train, FusedClassMultiplierTouchesOnlyTheClassLayer) {
  const auto cfg = small_config();
  const auto sample = prepare_sample({textured_image(64, 64, 3), {{10, 12, 40, 44}}, {1}}, cfg);
  TrainConfig tc;
  tc.steps = 1;
  tc.flip = false;
  auto plain = build_two_stream(cfg, 4), scaled = build_two_stream(cfg, 4);
  const auto before = build_two_stream(cfg, 4).named_parameters();
  train_detector(plain, {sample}, tc);
  tc.fused_cls_lr_mult = 40;
  train_detector(scaled, {sample}, tc);
  const auto a = plain.named_parameters(), b = scaled.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first.rfind("head.cls.", 0) == 0) {
      for (std::size_t j = 0; j < a[i].second->size(); ++j) {
        const double d_plain = (*a[i].second)[j] - (*before[i].second)[j];
        const double d_scaled = (*b[i].second)[j] - (*before[i].second)[j];
        EXPECT_NEAR(d_scaled, 40 * d_plain, 1e-6) << a[i].first;
      }
    } else {
      EXPECT_EQ(a[i].second->values(), b[i].second->values()) << a[i].first;
    }
  }
}

TEST(Train, LossHistoryIsDeterministic) {
  const auto cfg = small_config();
  const auto sample = prepare_sample({textured_image(64, 64, 5), {{8, 8, 30, 36}}, {1}}, cfg);
  TrainConfig tc;
  tc.steps = 3;
  tc.seed = 11;
  auto m1 = build_two_stream(cfg, 2), m2 = build_two_stream(cfg, 2);
  const auto h1 = train_detector(m1, {sample}, tc), h2 = train_detector(m2, {sample}, tc);
  ASSERT_EQ(h1.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(h1[i].l_total, h2[i].l_total);
  EXPECT_THROW(train_detector(m1, {}, tc), std::invalid_argument);
}

TEST(GradCheck, SuitePasses) {
  for (const auto& e : run_gradcheck_suite()) EXPECT_TRUE(e.passed()) << e.name << " rel err " << e.max_rel_error;
}

TEST(GradCheck, GraphWithEightRois) {
  GradCheckSuiteOptions opt;
  opt.graph_rois = 8;
  opt.graph_coords = 8;
  for (const auto& e : run_gradcheck_suite(opt)) EXPECT_TRUE(e.passed()) << e.name << " rel err " << e.max_rel_error;
}
