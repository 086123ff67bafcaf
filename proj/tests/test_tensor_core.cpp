#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "tamperlab/checkpoint.hpp"
#include "tamperlab/gradcheck.hpp"
#include "tamperlab/ops.hpp"
#include "tamperlab/optim.hpp"

using namespace tamperlab;

namespace {

template <typename T>
TensorPtr<T> rand_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1, bool param = false) {
  auto v = oracle::random_values<T>(shape_numel(s), rng, lo, hi);
  return param ? make_parameter<T>(std::move(s), std::move(v)) : make_tensor<T>(std::move(s), std::move(v));
}

// Values bounded away from zero by at least `gap`.
TensorPtr<double> rand_away_from_zero(Shape s, std::mt19937_64& rng, double gap) {
  auto t = make_parameter<double>(s);
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t->data()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

}  // namespace

// --- conv2d ------------------------------------------------------------------

TEST(Conv2d, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(1);
  Tape tape;
  auto x = rand_tensor<float>({1, 5, 7}, rng);
  auto k = make_tensor<float>({1, 1, 1, 1}, 1.0f);
  auto b = make_tensor<float>({1});
  auto y = conv2d(tape, x, k, b);
  EXPECT_EQ(y->shape(), x->shape());
  EXPECT_EQ(y->values(), x->values());
}

TEST(Conv2d, ZeroInputGivesBiasPlanes) {
  std::mt19937_64 rng(2);
  Tape tape;
  auto x = make_tensor<float>({3, 6, 6});
  auto k = rand_tensor<float>({2, 3, 3, 3}, rng);
  auto b = make_tensor<float>({2}, std::vector<float>{0.25f, -1.5f});
  auto y = conv2d(tape, x, k, b, 1, 1);
  for (std::size_t oc = 0; oc < 2; ++oc)
    for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ((*y)[oc * 36 + i], (*b)[oc]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937_64 rng(3);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}}) {
    const std::size_t ho_check = (8 + 2 * pad - 3) % stride;
    if (ho_check) continue;
    Tape tape;
    auto x = rand_tensor<float>({3, 8, 8}, rng);
    auto k = rand_tensor<float>({4, 3, 3, 3}, rng);
    auto b = rand_tensor<float>({4}, rng);
    auto y = conv2d(tape, x, k, b, stride, pad);
    std::vector<double> xd(x->values().begin(), x->values().end());
    std::vector<double> kd(k->values().begin(), k->values().end());
    std::vector<double> bd(b->values().begin(), b->values().end());
    std::size_t ho = 0, wo = 0;
    auto want = oracle::conv2d(xd, 3, 8, 8, kd, 4, 3, bd, stride, pad, ho, wo);
    ASSERT_EQ(y->size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LE(oracle::rel_err((*y)[i], want[i]), 1e-5);
  }
}

TEST(Conv2d, DoublePrecisionAgreesWithOracleToRoundoff) {
  std::mt19937_64 rng(4);
  BasicTape<double> tape;
  auto x = rand_tensor<double>({2, 9, 7}, rng);
  auto k = rand_tensor<double>({3, 2, 5, 5}, rng);
  auto b = rand_tensor<double>({3}, rng);
  auto y = conv2d(tape, x, k, b, 1, 2);
  std::size_t ho = 0, wo = 0;
  auto want = oracle::conv2d(x->to_vector(), 2, 9, 7, k->to_vector(), 3, 5, b->to_vector(), 1, 2, ho, wo);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LE(oracle::rel_err((*y)[i], want[i]), 1e-13);
}

TEST(Conv2d, RejectsMismatchedChannelsNamingTheDimension) {
  Tape tape;
  auto x = make_tensor<float>({3, 8, 8});
  auto k = make_tensor<float>({4, 2, 3, 3});
  auto b = make_tensor<float>({4});
  try {
    conv2d(tape, x, k, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("input-channel"), std::string::npos);
  }
  EXPECT_THROW(conv2d(tape, x, make_tensor<float>({4, 3, 2, 2}), b), ShapeError);
  EXPECT_THROW(conv2d(tape, x, make_tensor<float>({4, 3, 3, 3}), b, 2, 0), ShapeError);
}

// --- maxpool2d ----------------------------------------------------------------

TEST(MaxPool, ConstantInput) {
  Tape tape;
  auto y = maxpool2d(tape, make_tensor<float>({2, 4, 6}, 3.5f));
  EXPECT_EQ(y->shape(), (Shape{2, 2, 3}));
  for (float v : y->data()) EXPECT_EQ(v, 3.5f);
}

TEST(MaxPool, SingleNonzeroLandsInItsWindow) {
  Tape tape;
  auto x = make_tensor<float>({1, 4, 4});
  (*x)(0, 3, 2) = 7.0f;
  auto y = maxpool2d(tape, x);
  EXPECT_EQ((*y)(0, 1, 1), 7.0f);
  EXPECT_EQ((*y)(0, 0, 0), 0.0f);
}

TEST(MaxPool, MatchesWindowScanOracle) {
  std::mt19937_64 rng(5);
  Tape tape;
  auto x = rand_tensor<float>({2, 8, 8}, rng);
  auto y = maxpool2d(tape, x);
  auto want = oracle::maxpool2(std::vector<double>(x->values().begin(), x->values().end()), 2, 8, 8);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ((*y)[i], static_cast<float>(want[i]));
}

TEST(MaxPool, TiesRouteGradientToFirstInScanOrder) {
  Tape tape;
  auto x = make_parameter<float>({1, 2, 2}, 1.0f);
  auto y = maxpool2d(tape, x);
  auto loss = sum(tape, y);
  backward_pass(tape, loss);
  EXPECT_EQ(x->to_vector(), (std::vector<float>{1, 1, 1, 1}));
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool, RejectsOddDims) {
  Tape tape;
  EXPECT_THROW(maxpool2d(tape, make_tensor<float>({1, 3, 4})), ShapeError);
}

// --- linear -------------------------------------------------------------------

TEST(Linear, IdentityAndBiasOnly) {
  Tape tape;
  auto x = make_tensor<float>({3}, std::vector<float>{1, -2, 3});
  auto eye = make_tensor<float>({3, 3});
  for (std::size_t i = 0; i < 3; ++i) (*eye)(i, i) = 1;
  EXPECT_EQ(linear(tape, x, eye, make_tensor<float>({3}))->values(), x->values());
  auto b = make_tensor<float>({2}, std::vector<float>{0.5f, -4});
  EXPECT_EQ(linear(tape, x, make_tensor<float>({2, 3}), b)->values(), b->values());
}

TEST(Linear, MatchesDotProductOracle) {
  std::mt19937_64 rng(6);
  Tape tape;
  auto x = rand_tensor<float>({16}, rng);
  auto w = rand_tensor<float>({8, 16}, rng);
  auto b = rand_tensor<float>({8}, rng);
  auto y = linear(tape, x, w, b);
  auto d = [](const TensorPtr<float>& t) { return std::vector<double>(t->values().begin(), t->values().end()); };
  auto want = oracle::linear(d(x), d(w), d(b), 8, 16);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_LE(oracle::rel_err((*y)[i], want[i]), 1e-5);
}

TEST(Linear, BatchedRowsMatchSingleRows) {
  std::mt19937_64 rng(7);
  Tape tape;
  auto xs = rand_tensor<float>({3, 5}, rng);
  auto w = rand_tensor<float>({4, 5}, rng);
  auto b = rand_tensor<float>({4}, rng);
  auto ys = linear(tape, xs, w, b);
  for (std::size_t r = 0; r < 3; ++r) {
    auto xr = make_tensor<float>({5}, std::vector<float>(xs->values().begin() + r * 5, xs->values().begin() + r * 5 + 5));
    auto yr = linear(tape, xr, w, b);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ((*ys)(r, i), (*yr)[i]);
  }
}

TEST(Linear, RejectsDimensionMismatch) {
  Tape tape;
  EXPECT_THROW(linear(tape, make_tensor<float>({4}), make_tensor<float>({2, 3}), make_tensor<float>({2})), ShapeError);
  EXPECT_THROW(linear(tape, make_tensor<float>({3}), make_tensor<float>({2, 3}), make_tensor<float>({3})), ShapeError);
}

// --- relu / losses --------------------------------------------------------------

TEST(Relu, Examples) {
  Tape tape;
  EXPECT_EQ(relu(tape, make_tensor<float>({3}, std::vector<float>{-1, 0, 2}))->to_vector(),
            (std::vector<float>{0, 0, 2}));
  auto nonneg = make_tensor<float>({3}, std::vector<float>{0, 1, 5});
  EXPECT_EQ(relu(tape, nonneg)->values(), nonneg->values());
  auto x = make_parameter<float>({2}, std::vector<float>{-1, 2});
  auto loss = sum(tape, relu(tape, x));
  backward_pass(tape, loss);
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{0, 1}));
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLn2) {
  Tape tape;
  std::vector<int> labels{0};
  auto l = softmax_cross_entropy(tape, make_tensor<float>({1, 2}), labels);
  EXPECT_NEAR(l->item(), 0.6931472f, 1e-6);
}

TEST(SoftmaxCrossEntropy, LargeLogitsDoNotOverflow) {
  Tape tape;
  std::vector<int> labels{0};
  auto l = softmax_cross_entropy(tape, make_tensor<float>({1, 2}, std::vector<float>{1000, 0}), labels);
  EXPECT_TRUE(std::isfinite(l->item()));
  EXPECT_NEAR(l->item(), 0.0f, 1e-6);
}

TEST(SoftmaxCrossEntropy, MatchesExtendedPrecisionFormula) {
  std::mt19937_64 rng(8);
  Tape tape;
  auto z = rand_tensor<float>({5, 3}, rng, -3, 3);
  std::vector<int> labels{0, 2, 1, 1, 0};
  auto l = softmax_cross_entropy(tape, z, labels);
  long double total = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    long double denom = 0;
    for (std::size_t j = 0; j < 3; ++j) denom += std::exp(static_cast<long double>((*z)(i, j)));
    total += -(static_cast<long double>((*z)(i, labels[i])) - std::log(denom));
  }
  EXPECT_LE(oracle::rel_err(l->item(), static_cast<double>(total / 5)), 1e-6);
}

TEST(SoftmaxCrossEntropy, RejectsOutOfRangeLabel) {
  Tape tape;
  std::vector<int> labels{2};
  EXPECT_THROW(softmax_cross_entropy(tape, make_tensor<float>({1, 2}), labels), std::out_of_range);
}

TEST(SmoothL1, Examples) {
  Tape tape;
  auto zero = make_tensor<float>({1});
  EXPECT_FLOAT_EQ(smooth_l1_loss(tape, make_tensor<float>({1}, 0.5f), zero)->item(), 0.125f);
  EXPECT_FLOAT_EQ(smooth_l1_loss(tape, make_tensor<float>({1}, 2.0f), zero)->item(), 1.5f);
  EXPECT_FLOAT_EQ(smooth_l1_loss(tape, make_tensor<float>({1}, 0.0f), zero)->item(), 0.0f);
  EXPECT_THROW(smooth_l1_loss(tape, make_tensor<float>({2}), zero), ShapeError);
}

TEST(SignedSqrtL2Norm, Examples) {
  Tape tape;
  auto y = signed_sqrt_l2norm(tape, make_tensor<float>({2}, std::vector<float>{4, -4}));
  EXPECT_NEAR((*y)[0], 0.70710678f, 1e-7);
  EXPECT_NEAR((*y)[1], -0.70710678f, 1e-7);
  auto z = signed_sqrt_l2norm(tape, make_tensor<float>({5}));
  for (float v : z->data()) EXPECT_EQ(v, 0.0f);
}

TEST(SignedSqrtL2Norm, NonzeroInputHasUnitNorm) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    auto y = signed_sqrt_l2norm(tape, rand_tensor<float>({37}, rng, -10, 10));
    double ss = 0;
    for (float v : y->data()) ss += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
  }
}

TEST(SignedSqrtL2Norm, ZeroVectorHasZeroGradient) {
  Tape tape;
  auto x = make_parameter<float>({3});
  auto w = make_tensor<float>({1, 3}, 1.0f);
  auto loss = sum(tape, linear(tape, signed_sqrt_l2norm(tape, x), w, make_tensor<float>({1})));
  backward_pass(tape, loss);
  for (float g : x->grad()) EXPECT_EQ(g, 0.0f);
}

// --- backward pass ----------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tape tape;
  auto x = make_parameter<float>({3}, std::vector<float>{1, 2, 3});
  auto loss = sum(tape, x);
  backward_pass(tape, loss);
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{1, 1, 1}));
}

TEST(Backward, ParameterUsedTwiceAccumulatesBothPaths) {
  Tape tape;
  auto x = make_parameter<float>({2}, std::vector<float>{1, -2});
  auto loss = sum(tape, add(tape, x, scale(tape, x, 3.0f)));
  backward_pass(tape, loss);
  EXPECT_EQ(std::vector<float>(x->grad().begin(), x->grad().end()), (std::vector<float>{4, 4}));
}

TEST(Backward, UnusedParameterGradientIsExactlyZero) {
  Tape tape;
  auto used = make_parameter<float>({2}, 1.0f);
  auto unused = make_parameter<float>({4}, 1.0f);
  std::vector<TensorPtr<float>> params{used, unused};
  zero_grad(params);
  auto loss = sum(tape, used);
  backward_pass(tape, loss);
  for (float g : unused->grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, RejectsNonScalarSeed) {
  Tape tape;
  auto x = make_parameter<float>({2}, 1.0f);
  auto y = relu(tape, x);
  EXPECT_THROW(backward_pass(tape, y), ShapeError);
}

TEST(Backward, TapeVisitsEachRecordedOpOnce) {
  BasicTape<double> tape;
  auto x = make_parameter<double>({3}, std::vector<double>{0.5, -1, 2});
  auto y = relu(tape, x);
  auto loss = sum(tape, scale(tape, y, 2.0));
  EXPECT_EQ(tape.size(), 3u);
  backward_pass(tape, loss);
  EXPECT_EQ(std::vector<double>(x->grad().begin(), x->grad().end()), (std::vector<double>{2, 0, 2}));
}

TEST(Backward, InferenceGraphRecordsNothing) {
  Tape tape;
  auto x = make_tensor<float>({1, 4, 4}, 1.0f);
  maxpool2d(tape, relu(tape, x));
  EXPECT_TRUE(tape.empty());
}

// --- finite differences ---------------------------------------------------------

TEST(GradCheck, LinearLayer) {
  std::mt19937_64 rng(10);
  auto x = rand_tensor<double>({6}, rng, -1, 1, true);
  auto w = rand_tensor<double>({4, 6}, rng, -1, 1, true);
  auto b = rand_tensor<double>({4}, rng, -1, 1, true);
  auto err = finite_difference_check(
      [&](BasicTape<double>& t) {
        auto y = linear(t, x, w, b);
        return sum(t, smooth_l1_loss(t, y, make_tensor<double>({4}, 5.0)));
      },
      {x, w, b});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, Conv2d) {
  std::mt19937_64 rng(11);
  auto x = rand_tensor<double>({2, 6, 6}, rng, -1, 1, true);
  auto k = rand_tensor<double>({3, 2, 3, 3}, rng, -1, 1, true);
  auto b = rand_tensor<double>({3}, rng, -1, 1, true);
  auto weights = rand_tensor<double>({3, 6, 6}, rng);
  auto err = finite_difference_check(
      [&](BasicTape<double>& t) {
        auto y = conv2d(t, x, k, b, 1, 1);
        // Weighted sum keeps the scalar sensitive to every output.
        return sum(t, mul(t, y, weights));
      },
      {x, k, b});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, MaxPoolWithDistinctValues) {
  std::mt19937_64 rng(12);
  // A spacing of 0.01 between candidates keeps every window's argmax stable under eps = 1e-3.
  std::vector<double> vals(2 * 6 * 6);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  auto x = make_parameter<double>({2, 6, 6}, vals);
  auto w = rand_tensor<double>({2, 3, 3}, rng);
  auto err = finite_difference_check([&](BasicTape<double>& t) { return sum(t, mul(t, maxpool2d(t, x), w)); }, {x});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(13);
  auto x = rand_away_from_zero({20}, rng, 0.05);
  auto w = rand_tensor<double>({20}, rng);
  auto err = finite_difference_check([&](BasicTape<double>& t) { return sum(t, mul(t, relu(t, x), w)); }, {x});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(14);
  auto z = rand_tensor<double>({4, 3}, rng, -2, 2, true);
  std::vector<int> labels{2, 0, 1, 2};
  auto err = finite_difference_check([&](BasicTape<double>& t) { return softmax_cross_entropy(t, z, labels); }, {z});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, SmoothL1AwayFromTransition) {
  auto p = make_parameter<double>({4}, std::vector<double>{0.3, -0.6, 2.5, -1.7});
  auto target = make_tensor<double>({4});
  auto err = finite_difference_check([&](BasicTape<double>& t) { return smooth_l1_loss(t, p, target); }, {p});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, SignedSqrtL2Norm) {
  std::mt19937_64 rng(15);
  auto x = rand_away_from_zero({3, 8}, rng, 0.1);
  auto w = rand_tensor<double>({3, 8}, rng);
  auto err = finite_difference_check(
      [&](BasicTape<double>& t) { return sum(t, mul(t, signed_sqrt_l2norm(t, x), w)); }, {x});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, GatherAnchorChannels) {
  std::mt19937_64 rng(16);
  auto m = rand_tensor<double>({6, 3, 2}, rng, -1, 1, true);
  std::vector<std::size_t> idx{0, 5, 7, 17, 5};
  std::vector<int> labels{0, 1, 1, 0, 1};
  auto err = finite_difference_check(
      [&](BasicTape<double>& t) { return softmax_cross_entropy(t, gather_anchor_channels(t, m, 2, idx), labels); },
      {m});
  EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, ConvReluLinearCrossEntropyChain) {
  std::mt19937_64 rng(17);
  auto x = rand_tensor<double>({2, 4, 4}, rng);
  auto k = rand_tensor<double>({3, 2, 3, 3}, rng, -0.5, 0.5, true);
  auto kb = rand_tensor<double>({3}, rng, -0.1, 0.1, true);
  auto w = rand_tensor<double>({2, 12}, rng, -0.5, 0.5, true);
  auto wb = rand_tensor<double>({2}, rng, -0.1, 0.1, true);
  std::vector<int> labels{1};
  auto build = [&](BasicTape<double>& t) {
    auto h = maxpool2d(t, relu(t, conv2d(t, x, k, kb, 1, 1)));
    auto z = linear(t, reshape(t, h, {1, 12}), w, wb);
    return softmax_cross_entropy(t, z, labels);
  };
  auto rep = finite_difference_report(build, {k, kb, w, wb});
  EXPECT_LT(rep.max_rel_error, 1e-4) << "input " << rep.worst_input << " index " << rep.worst_index;
}

// --- optimizer ------------------------------------------------------------------

TEST(Sgd, PlainStepMovesAgainstGradient) {
  auto p = make_parameter<float>({1}, 1.0f);
  p->ensure_grad();
  p->grad()[0] = 100.0f;
  SgdConfig cfg;
  sgd_step(std::span<const TensorPtr<float>>(&p, 1), cfg, 0);
  EXPECT_FLOAT_EQ(p->item(), 0.9f);
  EXPECT_FALSE(p->has_grad());
}

TEST(Sgd, RateDecaysAtConfiguredStep) {
  SgdConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.rate_at(39999), 0.001);
  EXPECT_DOUBLE_EQ(cfg.rate_at(40000), 0.0001);
  auto p = make_parameter<double>({1}, 1.0);
  p->ensure_grad();
  p->grad()[0] = 100.0;
  sgd_step(std::span<const TensorPtr<double>>(&p, 1), cfg, 40000);
  EXPECT_NEAR(p->item(), 0.99, 1e-12);
}

TEST(Sgd, ZeroGradientLeavesParameter) {
  auto p = make_parameter<float>({3}, std::vector<float>{1, 2, 3});
  p->zero_grad();
  Sgd<float> opt({p}, SgdConfig{});
  opt.step(0);
  EXPECT_EQ(p->to_vector(), (std::vector<float>{1, 2, 3}));
}

TEST(Sgd, MomentumAccumulatesVelocity) {
  auto p = make_parameter<double>({1}, 0.0);
  SgdConfig cfg;
  Sgd<double> opt({p}, cfg);
  for (int step = 0; step < 2; ++step) {
    p->ensure_grad();
    p->grad()[0] = 1.0;
    opt.step(step);
  }
  // v1 = 1, v2 = 0.9 + 1.
  EXPECT_NEAR(p->item(), -0.001 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, PerParameterMultipliersScaleTheStep) {
  auto a = make_parameter<double>({1}, 0.0), b = make_parameter<double>({1}, 0.0);
  SgdConfig cfg;
  cfg.momentum = 0;
  Sgd<double> opt({a, b}, cfg, {1.0, 50.0});
  a->ensure_grad();
  b->ensure_grad();
  a->grad()[0] = b->grad()[0] = 1.0;
  opt.step(0);
  EXPECT_NEAR(a->item(), -0.001, 1e-15);
  EXPECT_NEAR(b->item(), -0.05, 1e-15);
  EXPECT_THROW(Sgd<double>({a, b}, cfg, {1.0}), std::invalid_argument);
  EXPECT_THROW(Sgd<double>({a}, cfg, {0.0}), std::invalid_argument);
}

TEST(Sgd, MissingGradientIsAnError) {
  auto p = make_parameter<float>({2});
  Sgd<float> opt({p}, SgdConfig{});
  EXPECT_THROW(opt.step(0), std::logic_error);
}

TEST(Sgd, RejectsBadConfig) {
  SgdConfig cfg;
  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SgdConfig{};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Sgd, ConvexQuadraticDecreasesMonotonically) {
  // f(p) = 0.5 * sum(a_i p_i^2); plain gradient descent with lr * a_i < 1.
  std::vector<double> a{1, 2, 4};
  auto p = make_parameter<double>({3}, std::vector<double>{3, -2, 1});
  SgdConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.decayed_rate = 0.001;
  cfg.momentum = 0;
  Sgd<double> opt({p}, cfg);
  auto f = [&] {
    double v = 0;
    for (std::size_t i = 0; i < 3; ++i) v += 0.5 * a[i] * (*p)[i] * (*p)[i];
    return v;
  };
  double prev = f();
  for (int step = 0; step < 200; ++step) {
    p->ensure_grad();
    for (std::size_t i = 0; i < 3; ++i) p->grad()[i] = a[i] * (*p)[i];
    opt.step(step);
    const double cur = f();
    ASSERT_LT(cur, prev) << "step " << step;
    prev = cur;
  }
}

// --- checkpoints ----------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(18);
  std::vector<NamedTensor> ts;
  ts.push_back({"backbone.conv1.weight", *rand_tensor<float>({4, 3, 3, 3}, rng, -5, 5)});
  ts.push_back({"head.bias", *rand_tensor<float>({7}, rng)});
  Tensor odd({2}, std::vector<float>{-0.0f, std::numeric_limits<float>::denorm_min()});
  ts.push_back({"odd", odd});
  auto back = decode_checkpoint(encode_checkpoint(ts));
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor.shape(), ts[i].tensor.shape());
    for (std::size_t j = 0; j < ts[i].tensor.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].tensor[j]), std::bit_cast<std::uint32_t>(ts[i].tensor[j]));
  }
}

TEST(Checkpoint, TruncatedOrCorruptArchiveIsRejected) {
  std::vector<NamedTensor> ts{{"w", Tensor({3}, std::vector<float>{1, 2, 3})}};
  auto bytes = encode_checkpoint(ts);
  auto cut = bytes;
  cut.resize(cut.size() - 2);
  EXPECT_THROW(decode_checkpoint(cut), CheckpointError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), CheckpointError);
}
