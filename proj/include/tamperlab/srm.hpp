#pragma once

// Fixed steganalysis residual filters that turn an RGB image into a
// three-channel local-noise map.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "tamperlab/image.hpp"
#include "tamperlab/ops.hpp"

namespace tamperlab {

using KernelPattern = std::array<std::array<double, 5>, 5>;

struct SrmKernelBank {
  std::array<KernelPattern, 3> patterns{};
  double truncation = 3.0;

  /// 3 x 3 x 5 x 5 weights; each output channel applies its pattern to every
  /// input channel with weight 1/3.
  template <typename T = float>
  BasicTensor<T> weights() const {
    BasicTensor<T> w({3, 3, 5, 5});
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 5; ++y)
          for (std::size_t x = 0; x < 5; ++x)
            w(o, c, y, x) = static_cast<T>(patterns[o][y][x] / 3.0);
    return w;
  }
};

inline SrmKernelBank srm_kernel_bank() {
  SrmKernelBank bank;
  // Second-order 3x3 square residual in a zero frame, /4.
  const double a[3][3] = {{-1, 2, -1}, {2, -4, 2}, {-1, 2, -1}};
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) bank.patterns[0][y + 1][x + 1] = a[y][x] / 4.0;
  // Full 5x5 square residual, /12.
  const double b[5][5] = {{-1, 2, -2, 2, -1},
                          {2, -6, 8, -6, 2},
                          {-2, 8, -12, 8, -2},
                          {2, -6, 8, -6, 2},
                          {-1, 2, -2, 2, -1}};
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) bank.patterns[1][y][x] = b[y][x] / 12.0;
  // Horizontal second difference, /2.
  bank.patterns[2][2][1] = 1 / 2.0;
  bank.patterns[2][2][2] = -2 / 2.0;
  bank.patterns[2][2][3] = 1 / 2.0;
  return bank;
}

/// 3 x H x W residual map clamped to [-T, T].
using NoiseMap = Tensor;

inline NoiseMap apply_srm(const Image& image, const SrmKernelBank& bank = srm_kernel_bank()) {
  if (image.width < 5 || image.height < 5)
    throw std::invalid_argument("apply_srm: image " + std::to_string(image.width) + "x" +
                                std::to_string(image.height) + " smaller than 5x5");
  Tape tape;
  auto input = std::make_shared<Tensor>(image_to_tensor<float>(image));
  auto kernels = std::make_shared<Tensor>(bank.weights<float>());
  auto bias = make_tensor<float>({3});
  auto out = conv2d(tape, input, kernels, bias, 1, 2);
  const float t = static_cast<float>(bank.truncation);
  for (float& v : out->data()) v = std::clamp(v, -t, t);
  return std::move(*out);
}

struct ResidualContrast {
  double inside = 0, outside = 0;  // mean |residual| over interior pixels
  std::size_t n_inside = 0, n_outside = 0;
  double ratio() const { return outside > 0 ? inside / outside : std::numeric_limits<double>::infinity(); }
};

/// Mean absolute residual inside vs outside the mask, counting only pixels whose
/// 5x5 support lies within the image and entirely on one side of the mask edge.
inline ResidualContrast residual_contrast(const NoiseMap& noise, const Mask& mask) {
  const int h = static_cast<int>(noise.dim(1)), w = static_cast<int>(noise.dim(2));
  if (mask.width != w || mask.height != h) throw std::invalid_argument("residual_contrast: mask size mismatch");
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  ResidualContrast r;
  for (int y = 2; y < h - 2; ++y)
    for (int x = 2; x < w - 2; ++x) {
      int set = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) set += mask.at(x + dx, y + dy) != 0;
      if (set != 0 && set != 25) continue;
      double a = 0;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) a += std::abs(noise[c * plane + i]);
      if (set == 25) {
        r.inside += a;
        r.n_inside += 3;
      } else {
        r.outside += a;
        r.n_outside += 3;
      }
    }
  if (r.n_inside) r.inside /= static_cast<double>(r.n_inside);
  if (r.n_outside) r.outside /= static_cast<double>(r.n_outside);
  return r;
}

/// Maps [-T, T] linearly onto [0, 255] per channel for inspection.
inline Image noise_map_to_image(const NoiseMap& noise, double truncation = 3.0) {
  const int h = static_cast<int>(noise.dim(1)), w = static_cast<int>(noise.dim(2));
  Image img(w, h);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = (noise[c * plane + i] + truncation) / (2 * truncation) * 255.0;
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return img;
}

}  // namespace tamperlab
