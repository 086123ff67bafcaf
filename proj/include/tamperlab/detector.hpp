#pragma once

// Two-stream region detector: RGB and noise backbones, an RPN on the RGB
// features, RoI pooling on both streams, bilinear fusion for the class head
// and an RGB-only box head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tamperlab/anchors.hpp"
#include "tamperlab/boxes.hpp"
#include "tamperlab/checkpoint.hpp"
#include "tamperlab/fusion.hpp"
#include "tamperlab/image.hpp"
#include "tamperlab/noise_cache.hpp"
#include "tamperlab/ops.hpp"
#include "tamperlab/srm.hpp"

namespace tamperlab {

enum class ClassMode { two_class, multi_class };
enum class StreamMode { two_stream, rgb_only, noise_only };
enum class FusionType { automatic, bilinear, compact };

inline const std::vector<std::string>& class_names(ClassMode mode) {
  static const std::vector<std::string> two{"background", "tampered"};
  static const std::vector<std::string> multi{"background", "splice", "copy_move", "removal"};
  return mode == ClassMode::two_class ? two : multi;
}

inline std::size_t num_classes(ClassMode mode) { return class_names(mode).size(); }

/// Class id for a label name in the given mode; throws on labels the mode cannot represent.
inline int class_id(ClassMode mode, const std::string& name) {
  if (mode == ClassMode::two_class) {
    if (name == "tampered" || name == "splice" || name == "copy_move" || name == "removal") return 1;
  } else {
    const auto& names = class_names(mode);
    for (std::size_t i = 1; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
  }
  throw std::invalid_argument("class label '" + name + "' is not valid for a " +
                              (mode == ClassMode::two_class ? std::string("two-class")
                                                            : std::string("multi-class")) +
                              " model");
}

inline std::string to_string(ClassMode m) { return m == ClassMode::two_class ? "two_class" : "multi_class"; }
inline std::string to_string(StreamMode m) {
  switch (m) {
    case StreamMode::two_stream: return "two_stream";
    case StreamMode::rgb_only: return "rgb_only";
    case StreamMode::noise_only: return "noise_only";
  }
  return "?";
}
inline std::string to_string(FusionType f) {
  switch (f) {
    case FusionType::automatic: return "auto";
    case FusionType::bilinear: return "bilinear";
    case FusionType::compact: return "compact";
  }
  return "?";
}

struct BackboneConfig {
  // One 3x3 conv + relu per stage; a 2x2 max pool follows every stage but the last.
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::size_t input_side = 128;

  std::size_t stride() const { return std::size_t{1} << (channels.size() - 1); }
  std::size_t out_channels() const { return channels.back(); }

  void validate() const {
    if (channels.empty()) throw std::invalid_argument("backbone: no stages");
    for (std::size_t c : channels)
      if (c == 0) throw std::invalid_argument("backbone: zero channel count");
    if (input_side == 0 || input_side % stride() != 0)
      throw std::invalid_argument("backbone: stride " + std::to_string(stride()) +
                                  " does not divide input side " + std::to_string(input_side));
  }
};

struct DetectorConfig {
  BackboneConfig backbone;
  ClassMode mode = ClassMode::two_class;
  StreamMode streams = StreamMode::two_stream;
  FusionType fusion = FusionType::automatic;
  std::size_t sketch_dim = 16384;
  std::uint64_t sketch_seed = 1;
  std::vector<double> anchor_scales{8, 16, 32, 64};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // h:w
  double lambda = 10;
  double iou_positive = 0.7;
  double iou_negative = 0.3;
  std::size_t rpn_batch = 64;
  std::size_t proposals_train = 64;
  std::size_t proposals_test = 300;
  std::size_t pre_nms_top = 1000;
  double rpn_nms = 0.7;
  double min_proposal_side = 8;
  std::size_t roi_size = 7;
  double roi_fg_iou = 0.5;
  std::size_t roi_batch = 32;
  double roi_fg_fraction = 0.25;
  std::size_t hidden = 256;
  double nms = 0.2;
  double score_floor = 0.05;
  double enlarge_pad = 4;  // 20 px at 600 px, scaled to the 128 px input

  std::size_t anchors_per_location() const { return anchor_scales.size() * anchor_ratios.size(); }

  /// Full bilinear below 256 channels, compact at or above.
  FusionType resolved_fusion() const {
    if (fusion != FusionType::automatic) return fusion;
    return backbone.out_channels() >= 256 ? FusionType::compact : FusionType::bilinear;
  }

  void validate() const {
    backbone.validate();
    if (anchor_scales.empty() || anchor_ratios.empty()) throw std::invalid_argument("detector: no anchors");
    if (!(iou_negative < iou_positive)) throw std::invalid_argument("detector: iou_negative must be below iou_positive");
    if (rpn_batch == 0 || roi_batch == 0 || proposals_train == 0 || proposals_test == 0)
      throw std::invalid_argument("detector: batch and proposal counts must be positive");
    if (roi_size == 0 || hidden == 0) throw std::invalid_argument("detector: roi_size and hidden must be positive");
    if (resolved_fusion() == FusionType::compact && (sketch_dim == 0 || (sketch_dim & (sketch_dim - 1))))
      throw std::invalid_argument("detector: sketch_dim must be a power of two");
  }
};

// --- RoI pooling ------------------------------------------------------------

/// Feature-map cell range [x1, x2) x [y1, y2) covered by a box: coordinates are
/// divided by the stride and rounded outward, then clamped to the map.
struct RoiWindow {
  std::size_t x1, y1, x2, y2;
};

inline RoiWindow roi_window(const Box& b, std::size_t stride, std::size_t fh, std::size_t fw) {
  const double s = static_cast<double>(stride);
  const double lx = std::floor(b.x1 / s), ly = std::floor(b.y1 / s);
  const double hx = std::ceil(b.x2 / s), hy = std::ceil(b.y2 / s);
  if (hx <= 0 || hy <= 0 || lx >= static_cast<double>(fw) || ly >= static_cast<double>(fh) || !(b.x2 >= b.x1) ||
      !(b.y2 >= b.y1))
    throw std::invalid_argument("roi_pool: box outside the feature map");
  auto clampd = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
  };
  RoiWindow w{clampd(lx, fw), clampd(ly, fh), clampd(hx, fw), clampd(hy, fh)};
  if (w.x2 <= w.x1) w.x2 = w.x1 + 1;
  if (w.y2 <= w.y1) w.y2 = w.y1 + 1;
  return w;
}

/// Max pooling of each box onto an out x out grid. Bin i spans cells
/// [floor(i * n / out), ceil((i + 1) * n / out)) of an n-cell window.
/// Features C x h x w, result R x C x out x out.
template <typename T>
TensorPtr<T> roi_pool(BasicTape<T>& tape, const TensorPtr<T>& features, const std::vector<Box>& rois,
                      std::size_t stride, std::size_t out = 7) {
  detail::require_rank(features->shape(), 3, "roi_pool features");
  if (rois.empty()) throw ShapeError("roi_pool: no boxes");
  const std::size_t c = features->dim(0), h = features->dim(1), w = features->dim(2);
  const std::size_t r = rois.size();
  auto pooled = make_tensor<T>({r, c, out, out});
  auto argmax = std::make_shared<std::vector<std::ptrdiff_t>>(pooled->size(), -1);
  const T* f = features->data().data();
  for (std::size_t ri = 0; ri < r; ++ri) {
    const RoiWindow win = roi_window(rois[ri], stride, h, w);
    const std::size_t rw = win.x2 - win.x1, rh = win.y2 - win.y1;
    for (std::size_t by = 0; by < out; ++by) {
      const std::size_t ys = win.y1 + by * rh / out, ye = win.y1 + ((by + 1) * rh + out - 1) / out;
      for (std::size_t bx = 0; bx < out; ++bx) {
        const std::size_t xs = win.x1 + bx * rw / out, xe = win.x1 + ((bx + 1) * rw + out - 1) / out;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t o = ((ri * c + ch) * out + by) * out + bx;
          std::ptrdiff_t best = -1;
          for (std::size_t y = ys; y < ye; ++y)
            for (std::size_t x = xs; x < xe; ++x) {
              const std::size_t i = (ch * h + y) * w + x;
              if (best < 0 || f[i] > f[best]) best = static_cast<std::ptrdiff_t>(i);
            }
          (*argmax)[o] = best;
          (*pooled)[o] = best < 0 ? T{0} : f[best];
        }
      }
    }
  }
  auto* src = features.get();
  auto* y = pooled.get();
  return tape.record("roi_pool", {features}, pooled, [=]() {
    src->ensure_grad();
    auto g = src->grad();
    auto gy = y->grad();
    for (std::size_t i = 0; i < gy.size(); ++i)
      if ((*argmax)[i] >= 0) g[static_cast<std::size_t>((*argmax)[i])] += gy[i];
  });
}

// --- model ------------------------------------------------------------------

template <typename T>
struct Layer {
  TensorPtr<T> weight, bias;
};

/// Per-RoI features of both streams cropped from the same proposals.
template <typename T>
struct RoiFeaturePair {
  TensorPtr<T> f_rgb;    // R x C x 7 x 7
  TensorPtr<T> f_noise;  // R x C x 7 x 7, null in single-stream modes
  std::vector<Box> proposals;
};

template <typename T>
class TwoStreamModel {
 public:
  DetectorConfig config;
  std::vector<Layer<T>> rgb_backbone;
  std::vector<Layer<T>> noise_backbone;
  Layer<T> rpn_conv, rpn_cls, rpn_reg;
  Layer<T> hidden;    // flattened RoI feature -> hidden
  Layer<T> cls_head;  // fused vector (two-stream) or hidden (single stream) -> classes
  Layer<T> box_head;  // hidden -> 4 deltas
  CountSketch sketch;

  bool uses_rgb() const { return config.streams != StreamMode::noise_only; }
  bool uses_noise() const { return config.streams != StreamMode::rgb_only; }

  std::vector<std::pair<std::string, TensorPtr<T>>> named_parameters() const {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    auto add_layer = [&](const std::string& name, const Layer<T>& l) {
      out.emplace_back(name + ".weight", l.weight);
      out.emplace_back(name + ".bias", l.bias);
    };
    for (std::size_t i = 0; i < rgb_backbone.size(); ++i) add_layer("rgb.conv" + std::to_string(i), rgb_backbone[i]);
    for (std::size_t i = 0; i < noise_backbone.size(); ++i)
      add_layer("noise.conv" + std::to_string(i), noise_backbone[i]);
    add_layer("rpn.conv", rpn_conv);
    add_layer("rpn.cls", rpn_cls);
    add_layer("rpn.reg", rpn_reg);
    add_layer("head.hidden", hidden);
    add_layer("head.cls", cls_head);
    add_layer("head.box", box_head);
    return out;
  }

  std::vector<TensorPtr<T>> parameters() const {
    std::vector<TensorPtr<T>> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  std::size_t fused_width() const {
    const std::size_t c = config.backbone.out_channels();
    if (config.streams != StreamMode::two_stream) return config.hidden;
    return config.resolved_fusion() == FusionType::compact ? config.sketch_dim : c * c;
  }

  /// Deep copy with every parameter converted to U.
  template <typename U>
  TwoStreamModel<U> cast() const {
    TwoStreamModel<U> m;
    m.config = config;
    m.sketch = sketch;
    auto conv = [](const Layer<T>& l) {
      Layer<U> o;
      o.weight = std::make_shared<BasicTensor<U>>(tensor_cast<T, U>(*l.weight));
      o.bias = std::make_shared<BasicTensor<U>>(tensor_cast<T, U>(*l.bias));
      o.weight->set_requires_grad(true);
      o.bias->set_requires_grad(true);
      return o;
    };
    for (auto& l : rgb_backbone) m.rgb_backbone.push_back(conv(l));
    for (auto& l : noise_backbone) m.noise_backbone.push_back(conv(l));
    m.rpn_conv = conv(rpn_conv);
    m.rpn_cls = conv(rpn_cls);
    m.rpn_reg = conv(rpn_reg);
    m.hidden = conv(hidden);
    m.cls_head = conv(cls_head);
    m.box_head = conv(box_head);
    return m;
  }
};

using Detector = TwoStreamModel<float>;

namespace detail {

// Uniform in [-gain / sqrt(fan_in), gain / sqrt(fan_in)], zero bias.
template <typename T>
Layer<T> init_layer(Shape weight_shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  const std::size_t out = weight_shape[0];
  Layer<T> l;
  l.weight = make_parameter<T>(std::move(weight_shape));
  for (auto& v : l.weight->data()) v = static_cast<T>(u(rng));
  l.bias = make_parameter<T>({out});
  return l;
}

}  // namespace detail

/// Fresh model. Layers followed by relu use gain sqrt(6), output heads gain 1.
template <typename T = float>
TwoStreamModel<T> build_two_stream(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  TwoStreamModel<T> m;
  m.config = config;
  std::mt19937_64 rng(seed);
  const double relu_gain = std::sqrt(6.0);
  auto backbone = [&](std::vector<Layer<T>>& layers) {
    std::size_t in = 3;
    for (std::size_t c : config.backbone.channels) {
      layers.push_back(detail::init_layer<T>({c, in, 3, 3}, in * 9, relu_gain, rng));
      in = c;
    }
  };
  if (m.uses_rgb()) backbone(m.rgb_backbone);
  if (m.uses_noise()) backbone(m.noise_backbone);
  const std::size_t c = config.backbone.out_channels();
  const std::size_t a = config.anchors_per_location();
  const std::size_t k = num_classes(config.mode);
  const std::size_t pooled = c * config.roi_size * config.roi_size;
  m.rpn_conv = detail::init_layer<T>({c, c, 3, 3}, c * 9, relu_gain, rng);
  m.rpn_cls = detail::init_layer<T>({a * 2, c, 1, 1}, c, 1.0, rng);
  m.rpn_reg = detail::init_layer<T>({a * 4, c, 1, 1}, c, 1.0, rng);
  m.hidden = detail::init_layer<T>({config.hidden, pooled}, pooled, relu_gain, rng);
  m.cls_head = detail::init_layer<T>({k, m.fused_width()}, m.fused_width(), 1.0, rng);
  m.box_head = detail::init_layer<T>({4, config.hidden}, config.hidden, 1.0, rng);
  if (config.streams == StreamMode::two_stream && config.resolved_fusion() == FusionType::compact)
    m.sketch = CountSketch::make(c, config.sketch_dim, config.sketch_seed);
  return m;
}

// --- input preparation --------------------------------------------------------

/// Resized image with both stream inputs. RGB is scaled to [-1, 1]; the noise
/// map is the truncated SRM residual of the resized image.
struct PreparedImage {
  Image image;
  double scale_x = 1, scale_y = 1;  // resized / original
  int original_width = 0, original_height = 0;
  Tensor rgb;
  NoiseMap noise;
};

/// Shorter side becomes `side`; both sides are rounded to multiples of `stride`.
inline std::pair<int, int> resized_dims(int width, int height, std::size_t side, std::size_t stride) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("resize: empty image");
  const double s = static_cast<double>(side) / std::min(width, height);
  auto snap = [&](double v) {
    const long st = static_cast<long>(stride);
    return static_cast<int>(std::max(st, std::lround(v / st) * st));
  };
  return {snap(width * s), snap(height * s)};
}

inline Tensor rgb_input(const Image& img) {
  Tensor t = image_to_tensor<float>(img);
  for (float& v : t.data()) v = v / 127.5f - 1.0f;
  return t;
}

inline PreparedImage prepare_image(const Image& img, const BackboneConfig& backbone) {
  PreparedImage p;
  p.original_width = img.width;
  p.original_height = img.height;
  const auto [w, h] = resized_dims(img.width, img.height, backbone.input_side, backbone.stride());
  p.image = resize_bilinear(img, w, h);
  p.scale_x = static_cast<double>(w) / img.width;
  p.scale_y = static_cast<double>(h) / img.height;
  p.rgb = rgb_input(p.image);
  p.noise = cached_noise_map(p.image);
  return p;
}

// --- forward --------------------------------------------------------------------

template <typename T>
struct TrunkOutput {
  TensorPtr<T> f_rgb;    // C x h x w (null in noise-only mode)
  TensorPtr<T> f_noise;  // C x h x w (null in rgb-only mode)
  TensorPtr<T> rpn_cls;  // 2A x h x w, anchor a uses channels 2a (background), 2a+1 (object)
  TensorPtr<T> rpn_reg;  // 4A x h x w
  AnchorSet anchors;
  int width = 0, height = 0;

  /// Features the RPN and the box head read.
  const TensorPtr<T>& primary() const { return f_rgb ? f_rgb : f_noise; }
};

template <typename T>
TensorPtr<T> run_backbone(BasicTape<T>& tape, const std::vector<Layer<T>>& layers, TensorPtr<T> x) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = relu(tape, conv2d(tape, x, layers[i].weight, layers[i].bias, 1, 1));
    if (i + 1 < layers.size()) x = maxpool2d(tape, x);
  }
  return x;
}

template <typename T>
TrunkOutput<T> forward_trunk(BasicTape<T>& tape, const TwoStreamModel<T>& m, const TensorPtr<T>& rgb,
                             const TensorPtr<T>& noise) {
  const std::size_t stride = m.config.backbone.stride();
  const auto& in = rgb ? rgb : noise;
  detail::require_rank(in->shape(), 3, "detector input");
  if (in->dim(1) % stride || in->dim(2) % stride)
    throw ShapeError("detector: input " + shape_string(in->shape()) + " not divisible by stride " +
                     std::to_string(stride));
  TrunkOutput<T> out;
  out.height = static_cast<int>(in->dim(1));
  out.width = static_cast<int>(in->dim(2));
  if (m.uses_rgb()) out.f_rgb = run_backbone(tape, m.rgb_backbone, rgb);
  if (m.uses_noise()) out.f_noise = run_backbone(tape, m.noise_backbone, noise);
  const auto& f = out.primary();
  auto h = relu(tape, conv2d(tape, f, m.rpn_conv.weight, m.rpn_conv.bias, 1, 1));
  out.rpn_cls = conv2d(tape, h, m.rpn_cls.weight, m.rpn_cls.bias, 1, 0);
  out.rpn_reg = conv2d(tape, h, m.rpn_reg.weight, m.rpn_reg.bias, 1, 0);
  out.anchors = generate_anchors(f->dim(1), f->dim(2), stride, m.config.anchor_scales, m.config.anchor_ratios);
  return out;
}

template <typename T>
RoiFeaturePair<T> pool_rois(BasicTape<T>& tape, const TwoStreamModel<T>& m, const TrunkOutput<T>& trunk,
                            const std::vector<Box>& rois) {
  RoiFeaturePair<T> pair;
  pair.proposals = rois;
  const std::size_t stride = m.config.backbone.stride(), s = m.config.roi_size;
  if (m.config.streams == StreamMode::two_stream) {
    pair.f_rgb = roi_pool(tape, trunk.f_rgb, rois, stride, s);
    pair.f_noise = roi_pool(tape, trunk.f_noise, rois, stride, s);
  } else {
    pair.f_rgb = roi_pool(tape, trunk.primary(), rois, stride, s);
  }
  return pair;
}

template <typename T>
struct HeadOutput {
  TensorPtr<T> cls_logits;  // R x K
  TensorPtr<T> box_deltas;  // R x 4
};

template <typename T>
HeadOutput<T> forward_heads(BasicTape<T>& tape, const TwoStreamModel<T>& m, const RoiFeaturePair<T>& pair) {
  const std::size_t r = pair.proposals.size();
  const std::size_t flat = pair.f_rgb->size() / r;
  auto h = relu(tape, linear(tape, reshape(tape, pair.f_rgb, {r, flat}), m.hidden.weight, m.hidden.bias));
  HeadOutput<T> out;
  out.box_deltas = linear(tape, h, m.box_head.weight, m.box_head.bias);
  if (m.config.streams == StreamMode::two_stream) {
    auto fused = m.config.resolved_fusion() == FusionType::compact
                     ? compact_bilinear_fuse(tape, pair.f_rgb, pair.f_noise, m.sketch)
                     : bilinear_fuse(tape, pair.f_rgb, pair.f_noise);
    out.cls_logits = linear(tape, fused, m.cls_head.weight, m.cls_head.bias);
  } else {
    out.cls_logits = linear(tape, h, m.cls_head.weight, m.cls_head.bias);
  }
  return out;
}

// --- losses -------------------------------------------------------------------

/// Scalar loss terms of one image. l_rpn_reg already carries the lambda weight.
struct LossBreakdown {
  double l_rpn_cls = 0, l_rpn_reg = 0, l_tamper = 0, l_bbox = 0, l_total = 0;
  double lambda = 10;

  static LossBreakdown from_components(double rpn_cls, double rpn_reg, double tamper, double bbox,
                                       double lambda = 10) {
    return {rpn_cls, rpn_reg, tamper, bbox, rpn_cls + rpn_reg + tamper + bbox, lambda};
  }
};

template <typename T>
struct LossTensors {
  TensorPtr<T> rpn_cls, rpn_reg, rpn, tamper, bbox, total;

  LossBreakdown breakdown(double lambda) const {
    return {rpn_cls->item(), rpn_reg->item(), tamper->item(), bbox->item(), total->item(), lambda};
  }
};

template <typename T>
struct RpnLoss {
  TensorPtr<T> cls, reg, combined;
};

/// (1/N_cls) sum CE over the sampled anchors + lambda (1/N_reg) sum smoothL1 over
/// the sampled positives, N_reg = number of anchors.
template <typename T>
RpnLoss<T> rpn_loss(BasicTape<T>& tape, const TensorPtr<T>& cls_map, const TensorPtr<T>& reg_map,
                    const AnchorAssignment& a, double lambda) {
  if (a.sampled.empty()) throw std::invalid_argument("rpn_loss: empty anchor sample");
  std::vector<int> labels;
  for (std::size_t i : a.sampled) labels.push_back(a.labels[i] == AnchorLabel::positive ? 1 : 0);
  RpnLoss<T> out;
  out.cls = softmax_cross_entropy(tape, gather_anchor_channels(tape, cls_map, 2, a.sampled), labels);
  const auto pos = a.sampled_positives();
  if (pos.empty()) {
    out.reg = make_tensor<T>({1});
  } else {
    auto target = make_tensor<T>({pos.size(), 4});
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = 0; j < 4; ++j) (*target)(i, j) = static_cast<T>(a.targets[pos[i]][j]);
    auto pred = gather_anchor_channels(tape, reg_map, 4, pos);
    out.reg = scale(tape, smooth_l1_loss(tape, pred, target), static_cast<T>(lambda / a.num_anchors));
  }
  out.combined = add(tape, out.cls, out.reg);
  return out;
}

/// Second-stage training RoIs with class labels and box targets.
struct RoiSample {
  std::vector<Box> rois;
  std::vector<int> labels;  // 0 = background
  std::vector<BoxDeltas> targets;
  std::vector<std::size_t> foreground;  // indices into rois
};

/// Candidates are the proposals plus the ground-truth boxes. IoU >= fg_iou with a
/// ground truth makes a foreground RoI of that box's class, anything else is
/// background. Up to fg_fraction of the batch is foreground.
template <typename Rng>
RoiSample sample_rois(const std::vector<Box>& proposals, const std::vector<Box>& gt,
                      const std::vector<int>& gt_classes, const DetectorConfig& cfg, Rng& rng) {
  if (gt.size() != gt_classes.size()) throw std::invalid_argument("sample_rois: boxes/classes length mismatch");
  std::vector<Box> cand = proposals;
  cand.insert(cand.end(), gt.begin(), gt.end());
  std::vector<std::size_t> fg, bg;
  std::vector<int> match(cand.size(), -1);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double best = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(cand[i], gt[g]);
      if (v > best) {
        best = v;
        match[i] = static_cast<int>(g);
      }
    }
    (best >= cfg.roi_fg_iou ? fg : bg).push_back(i);
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const auto max_fg = static_cast<std::size_t>(std::lround(cfg.roi_batch * cfg.roi_fg_fraction));
  const std::size_t n_fg = std::min(fg.size(), max_fg);
  const std::size_t n_bg = std::min(bg.size(), cfg.roi_batch - n_fg);
  RoiSample s;
  for (std::size_t k = 0; k < n_fg; ++k) {
    const std::size_t i = fg[k];
    s.foreground.push_back(s.rois.size());
    s.rois.push_back(cand[i]);
    s.labels.push_back(gt_classes[match[i]]);
    s.targets.push_back(encode_box_deltas(cand[i], gt[match[i]]));
  }
  for (std::size_t k = 0; k < n_bg; ++k) {
    s.rois.push_back(cand[bg[k]]);
    s.labels.push_back(0);
    s.targets.push_back({0, 0, 0, 0});
  }
  if (s.rois.empty()) throw std::runtime_error("sample_rois: no RoIs to train on");
  return s;
}

/// L_tamper = mean CE over sampled RoIs; L_bbox = smoothL1 summed over the
/// foreground RoIs' deltas and divided by their count (zero without foreground).
template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> stage_losses(BasicTape<T>& tape, const HeadOutput<T>& heads,
                                                   const RoiSample& sample) {
  auto tamper = softmax_cross_entropy(tape, heads.cls_logits, sample.labels);
  if (sample.foreground.empty()) return {tamper, make_tensor<T>({1})};
  auto target = make_tensor<T>({sample.foreground.size(), 4});
  auto pick = make_tensor<T>({sample.foreground.size(), 4});
  // Foreground rows come first in a RoiSample, so the prediction is a prefix.
  for (std::size_t i = 0; i < sample.foreground.size(); ++i) {
    if (sample.foreground[i] != i) throw std::logic_error("stage_losses: foreground RoIs must lead the sample");
    for (std::size_t j = 0; j < 4; ++j) (*target)(i, j) = static_cast<T>(sample.targets[i][j]);
  }
  const std::size_t nf = sample.foreground.size();
  const std::size_t r = heads.box_deltas->dim(0);
  TensorPtr<T> pred = nf < r ? leading_rows(tape, heads.box_deltas, nf) : heads.box_deltas;
  auto bbox = scale(tape, smooth_l1_loss(tape, pred, target), static_cast<T>(1.0 / nf));
  return {tamper, bbox};
}

template <typename T>
TensorPtr<T> total_loss(BasicTape<T>& tape, const TensorPtr<T>& rpn, const TensorPtr<T>& tamper,
                        const TensorPtr<T>& bbox) {
  return add(tape, add(tape, rpn, tamper), bbox);
}

// --- proposals ------------------------------------------------------------------

enum class Phase { train, test };

struct Proposals {
  std::vector<Box> boxes;
  std::vector<double> scores;
};

/// Decodes every anchor, clamps to the image, drops boxes with a side below
/// min_proposal_side, keeps the pre_nms_top best by objectness, applies NMS at
/// rpn_nms and returns the top proposals_train / proposals_test. Equal scores
/// keep the lower anchor index first.
template <typename T>
Proposals propose_rois(const BasicTensor<T>& cls_map, const BasicTensor<T>& reg_map, const AnchorSet& anchors,
                       int width, int height, Phase phase, const DetectorConfig& cfg) {
  const std::size_t a = anchors.per_location, hw = anchors.feature_h * anchors.feature_w;
  if (cls_map.size() != 2 * a * hw || reg_map.size() != 4 * a * hw)
    throw ShapeError("propose_rois: head maps do not match the anchor set");
  const double max_log = std::log(1000.0 / 16.0);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::size_t loc = i / a, k = i % a;
    const double z0 = cls_map[(2 * k) * hw + loc], z1 = cls_map[(2 * k + 1) * hw + loc];
    const double score = 1.0 / (1.0 + std::exp(z0 - z1));
    BoxDeltas d;
    for (std::size_t j = 0; j < 4; ++j) d[j] = reg_map[(4 * k + j) * hw + loc];
    d[2] = std::min(d[2], max_log);
    d[3] = std::min(d[3], max_log);
    if (!std::isfinite(score) || !std::isfinite(d[0]) || !std::isfinite(d[1]) || !std::isfinite(d[2]) ||
        !std::isfinite(d[3]))
      continue;
    const Box b = clamp_box(decode_box_deltas(anchors.boxes[i], d), width, height);
    if (b.width() < cfg.min_proposal_side || b.height() < cfg.min_proposal_side) continue;
    boxes.push_back(b);
    scores.push_back(score);
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  if (order.size() > cfg.pre_nms_top) order.resize(cfg.pre_nms_top);
  std::vector<Box> top_boxes;
  std::vector<double> top_scores;
  for (std::size_t i : order) {
    top_boxes.push_back(boxes[i]);
    top_scores.push_back(scores[i]);
  }
  const std::size_t keep_n = phase == Phase::train ? cfg.proposals_train : cfg.proposals_test;
  Proposals out;
  for (std::size_t i : nms_indices(top_boxes, top_scores, cfg.rpn_nms, keep_n)) {
    out.boxes.push_back(top_boxes[i]);
    out.scores.push_back(top_scores[i]);
  }
  return out;
}

// --- training loss for one image ----------------------------------------------------

/// Ground truth in resized-input coordinates.
struct ImageTargets {
  std::vector<Box> boxes;
  std::vector<int> classes;
};

template <typename T, typename Rng>
LossTensors<T> compute_losses(BasicTape<T>& tape, const TwoStreamModel<T>& m, const TensorPtr<T>& rgb,
                              const TensorPtr<T>& noise, const ImageTargets& targets, Rng& rng) {
  const auto& cfg = m.config;
  auto trunk = forward_trunk(tape, m, rgb, noise);
  AssignmentParams ap{cfg.iou_positive, cfg.iou_negative, cfg.rpn_batch, 0.5};
  const auto assignment = assign_anchor_labels(trunk.anchors, targets.boxes, trunk.width, trunk.height, ap, rng);
  auto rpn = rpn_loss(tape, trunk.rpn_cls, trunk.rpn_reg, assignment, cfg.lambda);
  const auto props = propose_rois(*trunk.rpn_cls, *trunk.rpn_reg, trunk.anchors, trunk.width, trunk.height,
                                  Phase::train, cfg);
  const auto sample = sample_rois(props.boxes, targets.boxes, targets.classes, cfg, rng);
  auto heads = forward_heads(tape, m, pool_rois(tape, m, trunk, sample.rois));
  auto [tamper, bbox] = stage_losses(tape, heads, sample);
  LossTensors<T> out{rpn.cls, rpn.reg, rpn.combined, tamper, bbox, nullptr};
  out.total = total_loss(tape, rpn.combined, tamper, bbox);
  return out;
}

// --- inference -----------------------------------------------------------------------

/// Undoes the training-time enlargement: each side moves in by pad unless it
/// lies on the image border, where the enlargement was clipped.
inline Box shrink_box(const Box& b, double pad, double width, double height) {
  Box r{b.x1 > 0 ? b.x1 + pad : b.x1, b.y1 > 0 ? b.y1 + pad : b.y1, b.x2 < width ? b.x2 - pad : b.x2,
        b.y2 < height ? b.y2 - pad : b.y2};
  if (r.width() <= 0 || r.height() <= 0) return b;
  return r;
}

/// Detections in resized-input coordinates for already prepared stream inputs.
/// Boxes are shrunk by enlarge_pad so they follow the tight ground-truth convention.
template <typename T>
std::vector<Detection> detect_prepared(const TwoStreamModel<T>& m, const BasicTensor<T>& rgb,
                                       const BasicTensor<T>& noise) {
  const auto& cfg = m.config;
  BasicTape<T> tape;
  auto rgb_p = std::make_shared<BasicTensor<T>>(rgb);
  auto noise_p = std::make_shared<BasicTensor<T>>(noise);
  auto trunk = forward_trunk(tape, m, rgb_p, noise_p);
  const auto props =
      propose_rois(*trunk.rpn_cls, *trunk.rpn_reg, trunk.anchors, trunk.width, trunk.height, Phase::test, cfg);
  if (props.boxes.empty()) return {};
  auto heads = forward_heads(tape, m, pool_rois(tape, m, trunk, props.boxes));
  const std::size_t k = heads.cls_logits->dim(1);
  const double max_log = std::log(1000.0 / 16.0);
  std::map<int, std::vector<Detection>> per_class;
  for (std::size_t r = 0; r < props.boxes.size(); ++r) {
    std::vector<double> p(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>((*heads.cls_logits)(r, j)));
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += (p[j] = std::exp((*heads.cls_logits)(r, j) - mx));
    BoxDeltas d;
    for (std::size_t j = 0; j < 4; ++j) d[j] = (*heads.box_deltas)(r, j);
    d[2] = std::min(d[2], max_log);
    d[3] = std::min(d[3], max_log);
    Box b = clamp_box(decode_box_deltas(props.boxes[r], d), trunk.width, trunk.height);
    if (!std::isfinite(b.x1) || !std::isfinite(b.x2) || !std::isfinite(b.y1) || !std::isfinite(b.y2)) continue;
    if (b.width() <= 0 || b.height() <= 0) continue;
    b = shrink_box(b, cfg.enlarge_pad, trunk.width, trunk.height);
    for (std::size_t j = 1; j < k; ++j) {
      const double score = p[j] / denom;
      if (score >= cfg.score_floor) per_class[static_cast<int>(j)].push_back({b, static_cast<int>(j), score});
    }
  }
  std::vector<Detection> out;
  for (auto& [label, dets] : per_class) {
    auto kept = nms(dets, cfg.nms);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

/// Full pipeline on an original-resolution image; boxes are returned in its coordinates.
inline std::vector<Detection> detect(const Detector& m, const Image& image) {
  const auto prep = prepare_image(image, m.config.backbone);
  auto dets = detect_prepared(m, prep.rgb, prep.noise);
  for (auto& d : dets)
    d.box = clamp_box({d.box.x1 / prep.scale_x, d.box.y1 / prep.scale_y, d.box.x2 / prep.scale_x,
                       d.box.y2 / prep.scale_y},
                      image.width, image.height);
  return dets;
}

inline std::vector<Detection> detect(const Detector& m, const std::string& image_path) {
  return detect(m, read_png_image(image_path));
}

// --- checkpoints ----------------------------------------------------------------------

namespace detail {

inline Tensor meta_tensor(const std::vector<double>& v) {
  std::vector<float> f(v.begin(), v.end());
  const std::size_t n = f.size();
  return Tensor({n}, std::move(f));
}

// 64-bit seed as four exact 16-bit float values.
inline std::vector<double> split_u64(std::uint64_t v) {
  return {static_cast<double>(v & 0xffff), static_cast<double>((v >> 16) & 0xffff),
          static_cast<double>((v >> 32) & 0xffff), static_cast<double>(v >> 48)};
}

inline std::uint64_t join_u64(const Tensor& t) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(t[i]) << (16 * i);
  return v;
}

}  // namespace detail

/// Parameters plus "meta.*" tensors recording class mode, streams, backbone,
/// fusion type and sketch parameters.
inline std::vector<NamedTensor> checkpoint_tensors(const Detector& m) {
  const auto& c = m.config;
  std::vector<NamedTensor> out;
  out.push_back({"meta.mode", detail::meta_tensor({c.mode == ClassMode::two_class ? 0.0 : 1.0})});
  out.push_back({"meta.streams", detail::meta_tensor({static_cast<double>(c.streams)})});
  std::vector<double> ch(c.backbone.channels.begin(), c.backbone.channels.end());
  out.push_back({"meta.backbone.channels", detail::meta_tensor(ch)});
  out.push_back({"meta.backbone.input_side", detail::meta_tensor({static_cast<double>(c.backbone.input_side)})});
  out.push_back({"meta.fusion", detail::meta_tensor({static_cast<double>(c.resolved_fusion())})});
  out.push_back({"meta.sketch_dim", detail::meta_tensor({static_cast<double>(c.sketch_dim)})});
  out.push_back({"meta.sketch_seed", detail::meta_tensor(detail::split_u64(c.sketch_seed))});
  out.push_back({"meta.anchor_scales", detail::meta_tensor(c.anchor_scales)});
  out.push_back({"meta.anchor_ratios", detail::meta_tensor(c.anchor_ratios)});
  out.push_back({"meta.hidden", detail::meta_tensor({static_cast<double>(c.hidden)})});
  out.push_back({"meta.roi_size", detail::meta_tensor({static_cast<double>(c.roi_size)})});
  for (const auto& [name, p] : m.named_parameters()) out.push_back({name, *p});
  return out;
}

inline void save_detector(const std::string& path, const Detector& m) { save_checkpoint(path, checkpoint_tensors(m)); }

/// Rebuilds the architecture from the metadata block, then loads every parameter.
/// `base` supplies the runtime constants (thresholds, proposal counts) that the
/// checkpoint does not record.
inline Detector detector_from_tensors(const std::vector<NamedTensor>& tensors, DetectorConfig base = {}) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  auto need = [&](const std::string& n) -> const Tensor& {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor '" + n + "'");
    return *it->second;
  };
  auto vec = [&](const std::string& n) {
    const Tensor& t = need(n);
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  base.mode = need("meta.mode")[0] == 0 ? ClassMode::two_class : ClassMode::multi_class;
  base.streams = static_cast<StreamMode>(static_cast<int>(need("meta.streams")[0]));
  base.backbone.channels.clear();
  for (double v : vec("meta.backbone.channels")) base.backbone.channels.push_back(static_cast<std::size_t>(v));
  base.backbone.input_side = static_cast<std::size_t>(need("meta.backbone.input_side")[0]);
  base.fusion = static_cast<FusionType>(static_cast<int>(need("meta.fusion")[0]));
  base.sketch_dim = static_cast<std::size_t>(need("meta.sketch_dim")[0]);
  base.sketch_seed = detail::join_u64(need("meta.sketch_seed"));
  base.anchor_scales = vec("meta.anchor_scales");
  base.anchor_ratios = vec("meta.anchor_ratios");
  base.hidden = static_cast<std::size_t>(need("meta.hidden")[0]);
  base.roi_size = static_cast<std::size_t>(need("meta.roi_size")[0]);
  Detector m = build_two_stream<float>(base, 0);
  for (auto& [name, p] : m.named_parameters()) {
    const Tensor& t = need(name);
    if (t.shape() != p->shape())
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_string(t.shape()) +
                            ", model expects " + shape_string(p->shape()));
    p->values() = t.values();
  }
  return m;
}

inline Detector load_detector(const std::string& path, DetectorConfig base = {}) {
  return detector_from_tensors(load_checkpoint(path), std::move(base));
}

}  // namespace tamperlab
