#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tamperlab/srm.hpp"
#include "tamperlab/synth.hpp"

using namespace tamperlab;

namespace {

double max_interior_abs(const NoiseMap& n, int border = 2) {
  const int h = static_cast<int>(n.dim(1)), w = static_cast<int>(n.dim(2));
  double m = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = border; y < h - border; ++y)
      for (int x = border; x < w - border; ++x) m = std::max(m, std::abs(static_cast<double>(n(c, y, x))));
  return m;
}

}  // namespace

TEST(SrmKernelBank, PatternsSumToZero) {
  const auto bank = srm_kernel_bank();
  for (const auto& p : bank.patterns) {
    double s = 0;
    for (const auto& row : p)
      for (double v : row) s += v;
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ(bank.truncation, 3.0);
}

TEST(SrmKernelBank, FirstMomentsVanish) {
  for (const auto& p : srm_kernel_bank().patterns) {
    double mx = 0, my = 0;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        mx += (x - 2) * p[y][x];
        my += (y - 2) * p[y][x];
      }
    EXPECT_NEAR(mx, 0.0, 1e-12);
    EXPECT_NEAR(my, 0.0, 1e-12);
  }
}

TEST(SrmKernelBank, KnownEntries) {
  const auto bank = srm_kernel_bank();
  // 5x5 residual row [2 -6 8 -6 2] / 12
  const double row[5] = {2, -6, 8, -6, 2};
  double s = 0;
  for (int x = 0; x < 5; ++x) {
    EXPECT_DOUBLE_EQ(bank.patterns[1][1][x], row[x] / 12.0);
    s += row[x];
  }
  EXPECT_EQ(s, 0);
  EXPECT_DOUBLE_EQ(bank.patterns[0][2][2], -1.0);
  EXPECT_DOUBLE_EQ(bank.patterns[0][0][0], 0.0);
  EXPECT_DOUBLE_EQ(bank.patterns[2][2][2], -1.0);
  EXPECT_DOUBLE_EQ(bank.patterns[2][1][2], 0.0);
}

TEST(ApplySrm, ConstantImageGivesZero) {
  const auto n = apply_srm(Image(32, 24, 128));
  EXPECT_EQ(n.dim(0), 3u);
  EXPECT_EQ(n.dim(1), 24u);
  EXPECT_EQ(n.dim(2), 32u);
  EXPECT_LT(max_interior_abs(n), 1e-4);
}

TEST(ApplySrm, LinearRampsGiveZeroInterior) {
  Image h(40, 30), v(40, 30), d(40, 30);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) {
        h.at(x, y, c) = static_cast<std::uint8_t>(x * 5);
        v.at(x, y, c) = static_cast<std::uint8_t>(y * 7);
        d.at(x, y, c) = static_cast<std::uint8_t>(x * 2 + y * 3 + c);
      }
  EXPECT_LT(max_interior_abs(apply_srm(h)), 1e-4);
  EXPECT_LT(max_interior_abs(apply_srm(v)), 1e-4);
  EXPECT_LT(max_interior_abs(apply_srm(d)), 1e-4);
}

TEST(ApplySrm, ImpulseReproducesFlippedKernel) {
  // Pixel value 1 in every channel; each channel's three 1/3 contributions add
  // back to the pattern itself.
  Image img(11, 11, 0);
  for (int c = 0; c < 3; ++c) img.at(5, 5, c) = 1;
  const auto n = apply_srm(img);
  const auto bank = srm_kernel_bank();
  for (int o = 0; o < 3; ++o)
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx)
        EXPECT_NEAR(n(o, 5 + dy, 5 + dx), bank.patterns[o][2 - dy][2 - dx], 1e-6) << o << " " << dy << " " << dx;
}

TEST(ApplySrm, OutputIsTruncated) {
  std::mt19937_64 rng(1);
  Image img(32, 32);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  const auto n = apply_srm(img);
  double m = 0;
  for (float v : n.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  EXPECT_LE(m, 3.0);
  EXPECT_EQ(m, 3.0);
}

TEST(ApplySrm, InvariantToConstantShiftInInterior) {
  std::mt19937_64 rng(2);
  Image a(30, 30), b(30, 30);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    a.pixels[i] = static_cast<std::uint8_t>(20 + rng() % 200);
    b.pixels[i] = static_cast<std::uint8_t>(a.pixels[i] + 17);
  }
  const auto na = apply_srm(a), nb = apply_srm(b);
  for (int c = 0; c < 3; ++c)
    for (int y = 2; y < 28; ++y)
      for (int x = 2; x < 28; ++x) EXPECT_NEAR(na(c, y, x), nb(c, y, x), 1e-4);
}

TEST(ApplySrm, MatchesDirectConvolutionOracle) {
  std::mt19937_64 rng(3);
  Image img(13, 9);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 8);  // small values stay under the clamp
  const auto n = apply_srm(img);
  const auto bank = srm_kernel_bank();
  std::vector<double> in(3 * 9 * 13), ker(3 * 3 * 25), bias(3, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 13; ++x) in[(c * 9 + y) * 13 + x] = img.at(x, y, c);
  for (int o = 0; o < 3; ++o)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) ker[((o * 3 + c) * 5 + y) * 5 + x] = bank.patterns[o][y][x] / 3.0;
  std::size_t ho = 0, wo = 0;
  const auto want = oracle::conv2d(in, 3, 9, 13, ker, 3, 5, bias, 1, 2, ho, wo);
  ASSERT_EQ(ho, 9u);
  for (std::size_t i = 0; i < want.size(); ++i)
    EXPECT_NEAR(n[i], std::clamp(want[i], -3.0, 3.0), 1e-5);
}

TEST(ApplySrm, RejectsUndersizedImage) {
  EXPECT_THROW(apply_srm(Image(4, 10)), std::invalid_argument);
  EXPECT_NO_THROW(apply_srm(Image(5, 5)));
}

TEST(NoiseInconsistency, NoisyPatchInCleanImage) {
  // sigma 5 noise inside a smooth image, clean outside
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 5.0);
  Image img(96, 96);
  Mask m(96, 96);
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) {
      const bool in = x >= 30 && x < 70 && y >= 25 && y < 65;
      m.at(x, y) = in;
      for (int c = 0; c < 3; ++c) {
        double v = 80 + 0.5 * x + 0.3 * y + 10 * c;
        if (in) v += g(rng);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  const auto r = residual_contrast(apply_srm(img), m);
  EXPECT_GT(r.n_inside, 0u);
  EXPECT_GT(r.n_outside, 0u);
  EXPECT_GE(r.ratio(), 2.0);
}

TEST(NoiseInconsistency, SplicesWithNoiseGapMostlyExceedRatioTwo) {
  ProceduralCorpusOptions noisy, clean;
  noisy.min_sigma = 5;
  noisy.max_sigma = 8;
  clean.min_sigma = 0;
  clean.max_sigma = 1;
  int pass = 0, n = 0;
  for (std::size_t i = 0; n < 40; ++i) {
    const auto src = make_procedural_image(i, 31, noisy);
    const auto tgt = make_procedural_image(i, 32, clean);
    std::mt19937_64 rng(derive_seed(33, i));
    const auto p = random_placement(src.objects[0].mask, 128, 128, rng);
    const auto s = make_splice(src, 0, tgt.image, tgt.background_id, *p);
    if (!s) continue;
    ++n;
    pass += residual_contrast(apply_srm(s->image), s->mask).ratio() >= 2.0;
  }
  EXPECT_GE(pass, 36);
}

TEST(NoiseMapImage, MapsRangeLinearly) {
  Tensor n({3, 1, 3});
  n(0, 0, 0) = -3;
  n(0, 0, 1) = 0;
  n(0, 0, 2) = 3;
  const Image img = noise_map_to_image(n);
  EXPECT_EQ(img.at(0, 0, 0), 0);
  EXPECT_EQ(img.at(1, 0, 0), 128);
  EXPECT_EQ(img.at(2, 0, 0), 255);
}
