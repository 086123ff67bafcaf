#pragma once

// Differentiable operations used by the detector. Every op computes its
// forward value immediately and, when an input carries gradients, registers
// its backward rule on the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tamperlab/tensor.hpp"

namespace tamperlab {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(s));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": shape " + shape_string(a) + " does not match " +
                     shape_string(b));
}

// Unrolls k x k patches into a (C*k*k) x (Ho*Wo) matrix.
template <typename T>
void im2col(const T* in, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t plane = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = in + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* out) {
  const std::size_t plane = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = out + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation with zero padding: input CxHxW, kernels OxCxKxK, bias O.
template <typename T>
TensorPtr<T> conv2d(BasicTape<T>& tape, const TensorPtr<T>& input, const TensorPtr<T>& kernels,
                    const TensorPtr<T>& bias, std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(input->shape(), 3, "conv2d input");
  detail::require_rank(kernels->shape(), 4, "conv2d kernels");
  detail::require_rank(bias->shape(), 1, "conv2d bias");
  const std::size_t c = input->dim(0), h = input->dim(1), w = input->dim(2);
  const std::size_t o = kernels->dim(0), k = kernels->dim(2);
  if (kernels->dim(1) != c)
    throw ShapeError("conv2d: kernel input-channel dimension " + std::to_string(kernels->dim(1)) +
                     " does not match input channels " + std::to_string(c));
  if (kernels->dim(3) != k) throw ShapeError("conv2d: kernel width differs from kernel height");
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size " + std::to_string(k) + " is not odd");
  if (bias->dim(0) != o)
    throw ShapeError("conv2d: bias length " + std::to_string(bias->dim(0)) +
                     " does not match output channels " + std::to_string(o));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * pad < k || (h + 2 * pad - k) % stride != 0)
    throw ShapeError("conv2d: height " + std::to_string(h) + " incompatible with kernel " +
                     std::to_string(k) + ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  if (w + 2 * pad < k || (w + 2 * pad - k) % stride != 0)
    throw ShapeError("conv2d: width " + std::to_string(w) + " incompatible with kernel " +
                     std::to_string(k) + ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t ckk = c * k * k, plane = ho * wo;

  auto cols = std::make_shared<AlignedVector<T>>(ckk * plane);
  detail::im2col(input->data().data(), c, h, w, k, stride, pad, ho, wo, cols->data());

  auto out = make_tensor<T>({o, ho, wo});
  {
    detail::CMapMat<T> wm(kernels->data().data(), o, ckk);
    detail::CMapMat<T> cm(cols->data(), ckk, plane);
    detail::MapMat<T> om(out->data().data(), o, plane);
    om.noalias() = wm * cm;
    for (std::size_t oc = 0; oc < o; ++oc) om.row(oc).array() += (*bias)[oc];
  }

  auto* in = input.get();
  auto* ker = kernels.get();
  auto* b = bias.get();
  auto* y = out.get();
  return tape.record("conv2d", {input, kernels, bias}, out,
                     [=]() {
                       detail::CMapMat<T> gy(y->grad().data(), o, plane);
                       if (b->requires_grad()) {
                         b->ensure_grad();
                         for (std::size_t oc = 0; oc < o; ++oc) b->grad()[oc] += gy.row(oc).sum();
                       }
                       if (ker->requires_grad()) {
                         ker->ensure_grad();
                         detail::MapMat<T> gw(ker->grad().data(), o, ckk);
                         detail::CMapMat<T> cm(cols->data(), ckk, plane);
                         gw.noalias() += gy * cm.transpose();
                       }
                       if (in->requires_grad()) {
                         in->ensure_grad();
                         AlignedVector<T> gcols(ckk * plane);
                         detail::MapMat<T> gc(gcols.data(), ckk, plane);
                         detail::CMapMat<T> wm(ker->data().data(), o, ckk);
                         gc.noalias() = wm.transpose() * gy;
                         detail::col2im(gcols.data(), c, h, w, k, stride, pad, ho, wo,
                                        in->grad().data());
                       }
                     });
}

/// 2x2 max pooling with stride 2; ties resolve to the first element in row-major order.
template <typename T>
TensorPtr<T> maxpool2d(BasicTape<T>& tape, const TensorPtr<T>& input) {
  detail::require_rank(input->shape(), 3, "maxpool2d input");
  const std::size_t c = input->dim(0), h = input->dim(1), w = input->dim(2);
  if (h % 2 || w % 2)
    throw ShapeError("maxpool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be even");
  const std::size_t ho = h / 2, wo = w / 2;
  auto out = make_tensor<T>({c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(c * ho * wo);
  const T* src = input->data().data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ci * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (ci * ho + oy) * wo + ox;
        (*out)[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  auto* in = input.get();
  auto* y = out.get();
  return tape.record("maxpool2d", {input}, out, [=]() {
    in->ensure_grad();
    auto g = in->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < gy.size(); ++i) g[(*argmax)[i]] += gy[i];
  });
}

/// weight * input + bias. Accepts a single vector (n) or a batch of rows (B x n).
template <typename T>
TensorPtr<T> linear(BasicTape<T>& tape, const TensorPtr<T>& input, const TensorPtr<T>& weight,
                    const TensorPtr<T>& bias) {
  detail::require_rank(weight->shape(), 2, "linear weight");
  detail::require_rank(bias->shape(), 1, "linear bias");
  const std::size_t m = weight->dim(0), n = weight->dim(1);
  std::size_t batch = 1;
  if (input->rank() == 1) {
    if (input->dim(0) != n)
      throw ShapeError("linear: input length " + std::to_string(input->dim(0)) +
                       " does not match weight columns " + std::to_string(n));
  } else if (input->rank() == 2) {
    batch = input->dim(0);
    if (input->dim(1) != n)
      throw ShapeError("linear: input width " + std::to_string(input->dim(1)) +
                       " does not match weight columns " + std::to_string(n));
  } else {
    throw ShapeError("linear: input must have rank 1 or 2, got " + shape_string(input->shape()));
  }
  if (bias->dim(0) != m)
    throw ShapeError("linear: bias length " + std::to_string(bias->dim(0)) +
                     " does not match weight rows " + std::to_string(m));
  auto out = input->rank() == 1 ? make_tensor<T>({m}) : make_tensor<T>({batch, m});
  {
    detail::CMapMat<T> x(input->data().data(), batch, n);
    detail::CMapMat<T> wm(weight->data().data(), m, n);
    detail::MapMat<T> y(out->data().data(), batch, m);
    y.noalias() = x * wm.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->data().data(), m);
    y.rowwise() += bv;
  }
  auto* in = input.get();
  auto* wt = weight.get();
  auto* b = bias.get();
  auto* yp = out.get();
  return tape.record("linear", {input, weight, bias}, out, [=]() {
    detail::CMapMat<T> gy(yp->grad().data(), batch, m);
    if (b->requires_grad()) {
      b->ensure_grad();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(b->grad().data(), m);
      gb += gy.colwise().sum();
    }
    if (wt->requires_grad()) {
      wt->ensure_grad();
      detail::MapMat<T> gw(wt->grad().data(), m, n);
      detail::CMapMat<T> x(in->data().data(), batch, n);
      gw.noalias() += gy.transpose() * x;
    }
    if (in->requires_grad()) {
      in->ensure_grad();
      detail::MapMat<T> gx(in->grad().data(), batch, n);
      detail::CMapMat<T> wm(wt->data().data(), m, n);
      gx.noalias() += gy * wm;
    }
  });
}

template <typename T>
TensorPtr<T> relu(BasicTape<T>& tape, const TensorPtr<T>& input) {
  auto out = make_tensor<T>(input->shape());
  auto src = input->data();
  auto dst = out->data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
  auto* in = input.get();
  auto* y = out.get();
  return tape.record("relu", {input}, out, [=]() {
    in->ensure_grad();
    auto g = in->grad();
    auto gy = y->grad();
    auto x = in->data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T{0}) g[i] += gy[i];
  });
}

/// Mean over rows of -log softmax(logits)[label], stabilized by max subtraction.
template <typename T>
TensorPtr<T> softmax_cross_entropy(BasicTape<T>& tape, const TensorPtr<T>& logits,
                                   std::span<const int> labels) {
  detail::require_rank(logits->shape(), 2, "softmax_cross_entropy logits");
  const std::size_t n = logits->dim(0), k = logits->dim(1);
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  auto probs = std::make_shared<AlignedVector<T>>(n * k);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  T total{0};
  const T* z = logits->data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(k) + ")");
    const T* row = z + i * k;
    const T mx = *std::max_element(row, row + k);
    T denom{0};
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx - log_denom);
    total += -(row[label] - mx - log_denom);
  }
  auto out = make_tensor<T>({1}, total / static_cast<T>(n));
  auto* in = logits.get();
  auto* y = out.get();
  return tape.record("softmax_cross_entropy", {logits}, out, [=]() {
    in->ensure_grad();
    const T scale = y->grad()[0] / static_cast<T>(n);
    auto g = in->grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        T d = (*probs)[i * k + j];
        if (static_cast<int>(j) == (*lab)[i]) d -= T{1};
        g[i * k + j] += scale * d;
      }
  });
}

/// Sum over coordinates of 0.5 x^2 (|x| < 1) or |x| - 0.5, x = pred - target.
/// The target is treated as a constant.
template <typename T>
TensorPtr<T> smooth_l1_loss(BasicTape<T>& tape, const TensorPtr<T>& pred,
                            const TensorPtr<T>& target) {
  detail::require_same_shape(pred->shape(), target->shape(), "smooth_l1_loss");
  T total{0};
  for (std::size_t i = 0; i < pred->size(); ++i) {
    const T x = (*pred)[i] - (*target)[i];
    const T ax = std::abs(x);
    total += ax < T{1} ? T{0.5} * x * x : ax - T{0.5};
  }
  auto out = make_tensor<T>({1}, total);
  auto* p = pred.get();
  auto t = target;
  auto* y = out.get();
  return tape.record("smooth_l1_loss", {pred}, out, [=]() {
    p->ensure_grad();
    const T gy = y->grad()[0];
    auto g = p->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = (*p)[i] - (*t)[i];
      const T d = std::abs(x) < T{1} ? x : (x > T{0} ? T{1} : T{-1});
      g[i] += gy * d;
    }
  });
}

/// sign(x) * sqrt(|x|) followed by L2 normalization, per row for rank-2 input.
/// A zero row maps to zero with zero gradient.
template <typename T>
TensorPtr<T> signed_sqrt_l2norm(BasicTape<T>& tape, const TensorPtr<T>& input) {
  if (input->rank() != 1 && input->rank() != 2)
    throw ShapeError("signed_sqrt_l2norm: input must have rank 1 or 2, got " +
                     shape_string(input->shape()));
  const std::size_t rows = input->rank() == 1 ? 1 : input->dim(0);
  const std::size_t n = input->size() / rows;
  auto out = make_tensor<T>(input->shape());
  auto norms = std::make_shared<AlignedVector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input->data().data() + r * n;
    T* z = out->data().data() + r * n;
    T ss{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T s = std::sqrt(std::abs(x[i]));
      z[i] = x[i] < T{0} ? -s : s;
      ss += z[i] * z[i];
    }
    const T norm = std::sqrt(ss);
    (*norms)[r] = norm;
    if (norm > T{0})
      for (std::size_t i = 0; i < n; ++i) z[i] /= norm;
  }
  auto* in = input.get();
  auto* y = out.get();
  return tape.record("signed_sqrt_l2norm", {input}, out, [=]() {
    in->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T norm = (*norms)[r];
      if (norm == T{0}) continue;
      const T* z = y->data().data() + r * n;
      const T* gz = y->grad().data() + r * n;
      const T* x = in->data().data() + r * n;
      T* gx = in->grad().data() + r * n;
      T dot{0};
      for (std::size_t i = 0; i < n; ++i) dot += z[i] * gz[i];
      for (std::size_t i = 0; i < n; ++i) {
        if (x[i] == T{0}) continue;
        const T gs = (gz[i] - z[i] * dot) / norm;
        gx[i] += gs / (T{2} * std::sqrt(std::abs(x[i])));
      }
    }
  });
}

template <typename T>
TensorPtr<T> sum(BasicTape<T>& tape, const TensorPtr<T>& input) {
  T total{0};
  for (T v : input->data()) total += v;
  auto out = make_tensor<T>({1}, total);
  auto* in = input.get();
  auto* y = out.get();
  return tape.record("sum", {input}, out, [=]() {
    in->ensure_grad();
    const T gy = y->grad()[0];
    for (T& g : in->grad()) g += gy;
  });
}

template <typename T>
TensorPtr<T> add(BasicTape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape(a->shape(), b->shape(), "add");
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a)[i] + (*b)[i];
  auto* pa = a.get();
  auto* pb = b.get();
  auto* y = out.get();
  return tape.record("add", {a, b}, out, [=]() {
    auto gy = y->grad();
    for (auto* p : {pa, pb}) {
      if (!p->requires_grad()) continue;
      p->ensure_grad();
      auto g = p->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

/// Elementwise product.
template <typename T>
TensorPtr<T> mul(BasicTape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape(a->shape(), b->shape(), "mul");
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a)[i] * (*b)[i];
  auto* pa = a.get();
  auto* pb = b.get();
  auto* y = out.get();
  return tape.record("mul", {a, b}, out, [=]() {
    auto gy = y->grad();
    if (pa->requires_grad()) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) pa->grad()[i] += gy[i] * (*pb)[i];
    }
    if (pb->requires_grad()) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) pb->grad()[i] += gy[i] * (*pa)[i];
    }
  });
}

template <typename T>
TensorPtr<T> scale(BasicTape<T>& tape, const TensorPtr<T>& a, T factor) {
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a)[i] * factor;
  auto* pa = a.get();
  auto* y = out.get();
  return tape.record("scale", {a}, out, [=]() {
    pa->ensure_grad();
    auto g = pa->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
  });
}

template <typename T>
TensorPtr<T> reshape(BasicTape<T>& tape, const TensorPtr<T>& a, Shape shape) {
  auto out = make_tensor<T>(std::move(shape), a->values());
  auto* pa = a.get();
  auto* y = out.get();
  return tape.record("reshape", {a}, out, [=]() {
    pa->ensure_grad();
    auto g = pa->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
  });
}

/// First n rows of a rank-2 tensor.
template <typename T>
TensorPtr<T> leading_rows(BasicTape<T>& tape, const TensorPtr<T>& a, std::size_t n) {
  detail::require_rank(a->shape(), 2, "leading_rows input");
  if (n == 0 || n > a->dim(0))
    throw ShapeError("leading_rows: cannot take " + std::to_string(n) + " rows of " + shape_string(a->shape()));
  const std::size_t cols = a->dim(1);
  auto out = make_tensor<T>({n, cols}, AlignedVector<T>(a->values().begin(), a->values().begin() + n * cols));
  auto* pa = a.get();
  auto* y = out.get();
  return tape.record("leading_rows", {a}, out, [=]() {
    pa->ensure_grad();
    auto g = pa->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
  });
}

/// Picks per-anchor channel groups from a (A*group) x H x W head output.
/// Anchor index i = (y * W + x) * A + a selects channels [a*group, (a+1)*group)
/// at (y, x). Result is n x group.
template <typename T>
TensorPtr<T> gather_anchor_channels(BasicTape<T>& tape, const TensorPtr<T>& map,
                                    std::size_t group, std::span<const std::size_t> anchors) {
  detail::require_rank(map->shape(), 3, "gather_anchor_channels input");
  const std::size_t ch = map->dim(0), h = map->dim(1), w = map->dim(2);
  if (group == 0 || ch % group)
    throw ShapeError("gather_anchor_channels: " + std::to_string(ch) +
                     " channels not divisible by group " + std::to_string(group));
  const std::size_t per_loc = ch / group;
  const std::size_t total = per_loc * h * w;
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  offsets->reserve(anchors.size() * group);
  for (std::size_t idx : anchors) {
    if (idx >= total)
      throw std::out_of_range("gather_anchor_channels: anchor " + std::to_string(idx) +
                              " outside " + std::to_string(total));
    const std::size_t a = idx % per_loc, loc = idx / per_loc;
    for (std::size_t g = 0; g < group; ++g) offsets->push_back((a * group + g) * h * w + loc);
  }
  if (anchors.empty()) throw ShapeError("gather_anchor_channels: no anchors selected");
  auto out = make_tensor<T>({anchors.size(), group});
  for (std::size_t i = 0; i < offsets->size(); ++i) (*out)[i] = (*map)[(*offsets)[i]];
  auto* src = map.get();
  auto* y = out.get();
  return tape.record("gather_anchor_channels", {map}, out, [=]() {
    src->ensure_grad();
    auto g = src->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < offsets->size(); ++i) g[(*offsets)[i]] += gy[i];
  });
}

}  // namespace tamperlab
