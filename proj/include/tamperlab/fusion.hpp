#pragma once

// Bilinear fusion of per-RoI RGB and noise features: the full outer-product
// form and the count-sketch (compact) approximation.

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tamperlab/ops.hpp"

namespace tamperlab {

namespace detail {

inline void check_fusion_pair(const Shape& a, const Shape& b) {
  if (a.size() < 2) throw ShapeError("bilinear fusion: features must be R x C x ..., got " + shape_string(a));
  require_same_shape(a, b, "bilinear fusion");
}

// Splits R x C x (spatial...) into (R, C, P).
inline std::array<std::size_t, 3> fusion_dims(const Shape& s) {
  std::size_t p = 1;
  for (std::size_t i = 2; i < s.size(); ++i) p *= s[i];
  return {s[0], s[1], p};
}

}  // namespace detail

/// Sum over spatial positions of the outer product f_rgb[p] (x) f_noise[p].
/// Inputs R x C x H x W; output R x C^2 with entry (i, j) at i * C + j.
template <typename T>
TensorPtr<T> bilinear_pool(BasicTape<T>& tape, const TensorPtr<T>& f_rgb, const TensorPtr<T>& f_noise) {
  detail::check_fusion_pair(f_rgb->shape(), f_noise->shape());
  const auto [r, c, p] = detail::fusion_dims(f_rgb->shape());
  auto out = make_tensor<T>({r, c * c});
  for (std::size_t i = 0; i < r; ++i) {
    detail::CMapMat<T> a(f_rgb->data().data() + i * c * p, c, p);
    detail::CMapMat<T> b(f_noise->data().data() + i * c * p, c, p);
    detail::MapMat<T> x(out->data().data() + i * c * c, c, c);
    x.noalias() = a * b.transpose();
  }
  auto* pa = f_rgb.get();
  auto* pb = f_noise.get();
  auto* y = out.get();
  return tape.record("bilinear_pool", {f_rgb, f_noise}, out, [=, r = r, c = c, p = p]() {
    for (std::size_t i = 0; i < r; ++i) {
      detail::CMapMat<T> g(y->grad().data() + i * c * c, c, c);
      if (pa->requires_grad()) {
        pa->ensure_grad();
        detail::CMapMat<T> b(pb->data().data() + i * c * p, c, p);
        detail::MapMat<T> ga(pa->grad().data() + i * c * p, c, p);
        ga.noalias() += g * b;
      }
      if (pb->requires_grad()) {
        pb->ensure_grad();
        detail::CMapMat<T> a(pa->data().data() + i * c * p, c, p);
        detail::MapMat<T> gb(pb->grad().data() + i * c * p, c, p);
        gb.noalias() += g.transpose() * a;
      }
    }
  });
}

/// bilinear_pool followed by signed square root and L2 normalization.
template <typename T>
TensorPtr<T> bilinear_fuse(BasicTape<T>& tape, const TensorPtr<T>& f_rgb, const TensorPtr<T>& f_noise) {
  return signed_sqrt_l2norm(tape, bilinear_pool(tape, f_rgb, f_noise));
}

/// Random hash/sign pairs of a tensor sketch, drawn once per model.
struct CountSketch {
  std::size_t channels = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> hash_rgb, hash_noise;
  std::vector<std::int8_t> sign_rgb, sign_noise;

  static CountSketch make(std::size_t channels, std::size_t dim, std::uint64_t seed) {
    if (dim == 0 || (dim & (dim - 1)) != 0)
      throw std::invalid_argument("compact bilinear: sketch dimension " + std::to_string(dim) +
                                  " is not a power of two");
    CountSketch s;
    s.channels = channels;
    s.dim = dim;
    s.seed = seed;
    // Raw engine output is fully specified by the standard, unlike distributions.
    std::mt19937_64 gen(seed);
    auto fill = [&](std::vector<std::uint32_t>& h, std::vector<std::int8_t>& sg) {
      h.resize(channels);
      sg.resize(channels);
      for (std::size_t i = 0; i < channels; ++i) {
        h[i] = static_cast<std::uint32_t>(gen() & (dim - 1));
        sg[i] = (gen() >> 63) ? 1 : -1;
      }
    };
    fill(s.hash_rgb, s.sign_rgb);
    fill(s.hash_noise, s.sign_noise);
    return s;
  }
};

/// Tensor-sketch approximation of bilinear_pool: per spatial position both
/// features are count-sketched to `dim`, circularly convolved and summed. Both
/// sketches are sparse, so the convolution is taken directly: entry (i, j) of
/// the per-RoI outer-product sum lands in bucket (h_rgb[i] + h_noise[j]) mod dim
/// with sign s_rgb[i] * s_noise[j]. Buckets no pair reaches are exactly zero.
/// Output R x dim, before normalization.
template <typename T>
TensorPtr<T> compact_bilinear_pool(BasicTape<T>& tape, const TensorPtr<T>& f_rgb,
                                   const TensorPtr<T>& f_noise, const CountSketch& sketch) {
  detail::check_fusion_pair(f_rgb->shape(), f_noise->shape());
  const auto [r, c, p] = detail::fusion_dims(f_rgb->shape());
  if (sketch.channels != c)
    throw ShapeError("compact bilinear: sketch built for " + std::to_string(sketch.channels) +
                     " channels, features have " + std::to_string(c));
  const std::size_t d = sketch.dim;
  auto bucket = std::make_shared<std::vector<std::uint32_t>>(c * c);
  auto sign = std::make_shared<AlignedVector<T>>(c * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      (*bucket)[i * c + j] = static_cast<std::uint32_t>((sketch.hash_rgb[i] + sketch.hash_noise[j]) & (d - 1));
      (*sign)[i * c + j] = static_cast<T>(sketch.sign_rgb[i] * sketch.sign_noise[j]);
    }
  auto out = make_tensor<T>({r, d});
  detail::RowMat<T> outer(c, c);
  for (std::size_t ri = 0; ri < r; ++ri) {
    detail::CMapMat<T> a(f_rgb->data().data() + ri * c * p, c, p);
    detail::CMapMat<T> b(f_noise->data().data() + ri * c * p, c, p);
    outer.noalias() = a * b.transpose();
    T* o = out->data().data() + ri * d;
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j) o[(*bucket)[i * c + j]] += (*sign)[i * c + j] * outer(i, j);
  }
  auto* pa = f_rgb.get();
  auto* pb = f_noise.get();
  auto* y = out.get();
  return tape.record("compact_bilinear_pool", {f_rgb, f_noise}, out, [=, r = r, c = c, p = p]() {
    detail::RowMat<T> g(c, c);
    for (std::size_t ri = 0; ri < r; ++ri) {
      const T* gy = y->grad().data() + ri * d;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) g(i, j) = (*sign)[i * c + j] * gy[(*bucket)[i * c + j]];
      if (pa->requires_grad()) {
        pa->ensure_grad();
        detail::CMapMat<T> b(pb->data().data() + ri * c * p, c, p);
        detail::MapMat<T> ga(pa->grad().data() + ri * c * p, c, p);
        ga.noalias() += g * b;
      }
      if (pb->requires_grad()) {
        pb->ensure_grad();
        detail::CMapMat<T> a(pa->data().data() + ri * c * p, c, p);
        detail::MapMat<T> gb(pb->grad().data() + ri * c * p, c, p);
        gb.noalias() += g.transpose() * a;
      }
    }
  });
}

template <typename T>
TensorPtr<T> compact_bilinear_fuse(BasicTape<T>& tape, const TensorPtr<T>& f_rgb,
                                   const TensorPtr<T>& f_noise, const CountSketch& sketch) {
  return signed_sqrt_l2norm(tape, compact_bilinear_pool(tape, f_rgb, f_noise, sketch));
}

}  // namespace tamperlab
