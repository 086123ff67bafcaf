#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tamperlab/anchors.hpp"
#include "tamperlab/boxes.hpp"

using namespace tamperlab;

namespace {

Box random_box(std::mt19937_64& rng, double side = 100) {
  std::uniform_real_distribution<double> pos(0, side), len(2, side / 3);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + len(rng), y + len(rng)};
}

}  // namespace

TEST(Iou, Examples) {
  const Box a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, {20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou(a, {5, 5, 15, 15}), 25.0 / 175.0, 1e-12);
  EXPECT_DOUBLE_EQ(iou(a, {10, 0, 20, 10}), 0.0);  // touching edges
  EXPECT_DOUBLE_EQ(iou({3, 3, 3, 9}, {0, 0, 10, 10}), 0.0);
}

TEST(Iou, MatchesIntegerGridCount) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 20);
  for (int t = 0; t < 200; ++t) {
    int c[8];
    for (int& v : c) v = u(rng);
    const Box a{double(std::min(c[0], c[1])), double(std::min(c[2], c[3])), double(std::max(c[0], c[1]) + 1),
                double(std::max(c[2], c[3]) + 1)};
    const Box b{double(std::min(c[4], c[5])), double(std::min(c[6], c[7])), double(std::max(c[4], c[5]) + 1),
                double(std::max(c[6], c[7]) + 1)};
    int inter = 0, uni = 0;
    for (int y = 0; y < 22; ++y)
      for (int x = 0; x < 22; ++x) {
        const bool ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
        const bool ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
        inter += ia && ib;
        uni += ia || ib;
      }
    EXPECT_NEAR(iou(a, b), double(inter) / uni, 1e-12);
  }
}

TEST(BoxDeltas, Examples) {
  const Box p{0, 0, 10, 10};
  for (double v : encode_box_deltas(p, p)) EXPECT_DOUBLE_EQ(v, 0.0);
  const auto d = encode_box_deltas(p, {5, 5, 15, 15});
  EXPECT_DOUBLE_EQ(d[0], 0.5);
  EXPECT_DOUBLE_EQ(d[1], 0.5);
  EXPECT_DOUBLE_EQ(d[2], 0.0);
  EXPECT_DOUBLE_EQ(d[3], 0.0);
  EXPECT_THROW(encode_box_deltas({0, 0, 0, 5}, p), std::invalid_argument);
}

TEST(BoxDeltas, DecodeInvertsEncode) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 500; ++t) {
    const Box p = random_box(rng), g = random_box(rng);
    const Box r = decode_box_deltas(p, encode_box_deltas(p, g));
    EXPECT_NEAR(r.x1, g.x1, 1e-5);
    EXPECT_NEAR(r.y1, g.y1, 1e-5);
    EXPECT_NEAR(r.x2, g.x2, 1e-5);
    EXPECT_NEAR(r.y2, g.y2, 1e-5);
  }
}

TEST(EnlargeBox, Examples) {
  EXPECT_EQ(enlarge_box({30, 30, 60, 60}, 20, 100, 100), (Box{10, 10, 80, 80}));
  EXPECT_EQ(enlarge_box({5, 5, 30, 30}, 20, 100, 100), (Box{0, 0, 50, 50}));
  EXPECT_EQ(enlarge_box({5, 7, 30, 31}, 0, 100, 100), (Box{5, 7, 30, 31}));
}

TEST(Nms, Examples) {
  EXPECT_EQ(nms({{{1, 2, 3, 4}, 1, 0.5}}).size(), 1u);
  const auto kept = nms({{{0, 0, 10, 10}, 1, 0.8}, {{0, 0, 10, 10}, 1, 0.9}});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].score, 0.9);
  EXPECT_TRUE(nms({}).empty());
  EXPECT_THROW(nms_indices({{0, 0, 1, 1}}, {}, 0.2), std::invalid_argument);
}

TEST(Nms, MatchesExhaustiveOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Box> boxes;
    std::vector<oracle::Rect> rects;
    std::vector<double> scores;
    for (int i = 0; i < 50; ++i) {
      const Box b = random_box(rng);
      boxes.push_back(b);
      rects.push_back({b.x1, b.y1, b.x2, b.y2});
      scores.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
    }
    for (double thr : {0.2, 0.5}) EXPECT_EQ(nms_indices(boxes, scores, thr), oracle::nms(rects, scores, thr));
  }
}

TEST(Nms, KeptBoxesAreASubsetWithLowMutualOverlap) {
  std::mt19937_64 rng(3);
  std::vector<Detection> dets;
  for (int i = 0; i < 80; ++i) dets.push_back({random_box(rng, 60), 1, std::uniform_real_distribution<double>(0, 1)(rng)});
  const auto kept = nms(dets, 0.2);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    EXPECT_NE(std::find(dets.begin(), dets.end(), kept[i]), dets.end());
    if (i) EXPECT_GE(kept[i - 1].score, kept[i].score);
    for (std::size_t j = i + 1; j < kept.size(); ++j) EXPECT_LE(iou(kept[i].box, kept[j].box), 0.2);
  }
}

TEST(Anchors, CountAndLayout) {
  const auto a = generate_anchors(8, 8, 8, {8, 16, 32, 64}, {0.5, 1, 2});
  EXPECT_EQ(a.size(), 768u);
  EXPECT_EQ(a.per_location, 12u);
  // location (0,0), scale 16, ratio 1
  EXPECT_EQ(a.boxes[1 * 3 + 1], (Box{-4, -4, 12, 12}));
  // location (x=2, y=1), same scale and ratio
  EXPECT_EQ(a.boxes[(1 * 8 + 2) * 12 + 4], (Box{12, 4, 28, 20}));
}

TEST(Anchors, RatiosPreserveArea) {
  const auto a = generate_anchors(1, 1, 8, {16, 40}, {0.5, 1, 2});
  for (std::size_t s = 0; s < 2; ++s) {
    const double ref = a.boxes[s * 3 + 1].area();
    for (std::size_t r : {0u, 2u}) EXPECT_NEAR(a.boxes[s * 3 + r].area() / ref, 1.0, 1e-4);
  }
  EXPECT_NEAR(a.boxes[2].height() / a.boxes[2].width(), 2.0, 1e-12);
  EXPECT_THROW(generate_anchors(1, 1, 8, {}, {1}), std::invalid_argument);
}

TEST(AnchorAssignment, PositiveNegativeIgnore) {
  AnchorSet a;
  a.boxes = {{10, 10, 30, 30}, {10, 10, 50, 30}, {60, 60, 80, 80}, {-5, 0, 20, 20}};
  a.per_location = 1;
  std::mt19937_64 rng(4);
  const auto r = assign_anchor_labels(a, {{10, 10, 30, 30}}, 100, 100, {}, rng);
  EXPECT_EQ(r.labels[0], AnchorLabel::positive);  // identical to GT
  EXPECT_EQ(r.labels[1], AnchorLabel::ignore);    // IoU exactly 0.5
  EXPECT_EQ(r.labels[2], AnchorLabel::negative);  // disjoint
  EXPECT_EQ(r.labels[3], AnchorLabel::ignore);    // crosses the border
  EXPECT_EQ(r.num_anchors, 4u);
  EXPECT_EQ(r.sampled, (std::vector<std::size_t>{0, 2}));
  for (double v : r.targets[0]) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(AnchorAssignment, BestAnchorForcedPositive) {
  AnchorSet a;
  a.boxes = {{0, 0, 20, 20}, {50, 50, 70, 70}};
  a.per_location = 1;
  std::mt19937_64 rng(5);
  const auto r = assign_anchor_labels(a, {{5, 5, 25, 25}}, 100, 100, {}, rng);
  EXPECT_LT(iou(a.boxes[0], {5, 5, 25, 25}), 0.7);
  EXPECT_EQ(r.labels[0], AnchorLabel::positive);
  EXPECT_EQ(r.labels[1], AnchorLabel::negative);
}

TEST(AnchorAssignment, BatchRespectsPositiveCap) {
  const auto a = generate_anchors(16, 16, 8, {16, 32}, {0.5, 1, 2});
  std::mt19937_64 rng(6);
  AssignmentParams p;
  p.batch_size = 8;
  p.positive_iou = 0.1;  // many positives
  const auto r = assign_anchor_labels(a, {{20, 20, 100, 100}}, 128, 128, p, rng);
  EXPECT_EQ(r.batch_size(), 8u);
  EXPECT_EQ(r.sampled_positives().size(), 4u);
}

TEST(AnchorAssignment, NoNegativesIsRejected) {
  AnchorSet a;
  a.boxes = {{0, 0, 10, 10}};
  a.per_location = 1;
  std::mt19937_64 rng(7);
  EXPECT_THROW(assign_anchor_labels(a, {{0, 0, 10, 10}}, 10, 10, {}, rng), std::runtime_error);
}
