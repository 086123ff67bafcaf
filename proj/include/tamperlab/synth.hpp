#pragma once

// Synthetic tamper generation: splice, copy-move and removal samples from a
// corpus of images with object masks, the disjoint train/test split,
// augmentations, attacks and the JSON-lines manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tamperlab/boxes.hpp"
#include "tamperlab/image.hpp"
#include "tamperlab/parallel.hpp"

namespace tamperlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Per-item seed so that item i does not depend on how many items precede it.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index));
}

// --- records ---------------------------------------------------------------------

struct ObjectInstance {
  std::string object_id;
  Mask mask;  // same size as the image
};

struct SourceRecord {
  std::string image_path;
  Image image;
  std::vector<ObjectInstance> objects;
  std::string background_id;
  double noise_sigma = 0;
};

struct LabeledBox {
  Box box;
  std::string label;
  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct Provenance {
  std::string object_id;  // empty for authentic images
  std::string background_id;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct TamperSample {
  Image image;
  Mask mask;
  std::vector<LabeledBox> boxes;
  std::string technique;
  Provenance provenance;
  std::string split;
};

inline const std::vector<std::string>& tamper_techniques() {
  static const std::vector<std::string> t{"splice", "copy_move", "removal"};
  return t;
}

/// "tampered" labels generic two-class datasets.
inline bool is_known_technique(const std::string& t) {
  return t == "splice" || t == "copy_move" || t == "removal" || t == "authentic" || t == "tampered";
}

// --- mask geometry -------------------------------------------------------------------

/// Tight (xmin, ymin, xmax + 1, ymax + 1) bounds of each 8-connected component,
/// in order of each component's first pixel in row-major scan.
inline std::vector<Box> component_boxes(const Mask& mask) {
  std::vector<Box> out;
  std::vector<char> seen(mask.bits.size(), 0);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * mask.width + x;
      if (!mask.bits[i] || seen[i]) continue;
      int x1 = x, y1 = y, x2 = x, y2 = y;
      seen[i] = 1;
      stack.assign(1, {x, y});
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        x1 = std::min(x1, cx);
        x2 = std::max(x2, cx);
        y1 = std::min(y1, cy);
        y2 = std::max(y2, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= mask.width || ny >= mask.height) continue;
            const std::size_t j = static_cast<std::size_t>(ny) * mask.width + nx;
            if (mask.bits[j] && !seen[j]) {
              seen[j] = 1;
              stack.push_back({nx, ny});
            }
          }
      }
      out.push_back({static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
                     static_cast<double>(y2 + 1)});
    }
  return out;
}

inline std::vector<LabeledBox> labeled_boxes(const Mask& mask, const std::string& label) {
  std::vector<LabeledBox> out;
  for (const Box& b : component_boxes(mask)) out.push_back({b, label});
  return out;
}

/// Tight bounds of all set pixels, if any.
inline std::optional<Box> mask_bounds(const Mask& mask) {
  int x1 = mask.width, y1 = mask.height, x2 = -1, y2 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return std::nullopt;
  return Box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
             static_cast<double>(y2 + 1)};
}

/// Translation applied to object pixels.
struct Placement {
  int dx = 0, dy = 0;
};

/// Mask moved by the placement onto a width x height canvas; nullopt if any pixel leaves it.
inline std::optional<Mask> translate_mask(const Mask& mask, Placement p, int width, int height) {
  Mask out(width, height);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      const int nx = x + p.dx, ny = y + p.dy;
      if (nx < 0 || ny < 0 || nx >= width || ny >= height) return std::nullopt;
      out.at(nx, ny) = 1;
    }
  return out;
}

/// Uniform placement that keeps the mask's bounding box inside the canvas.
template <typename Rng>
std::optional<Placement> random_placement(const Mask& mask, int width, int height, Rng& rng) {
  const auto b = mask_bounds(mask);
  if (!b) return std::nullopt;
  const int bw = static_cast<int>(b->width()), bh = static_cast<int>(b->height());
  if (bw > width || bh > height) return std::nullopt;
  std::uniform_int_distribution<int> ux(0, width - bw), uy(0, height - bh);
  const int nx = ux(rng), ny = uy(rng);
  return Placement{nx - static_cast<int>(b->x1), ny - static_cast<int>(b->y1)};
}

// --- techniques ------------------------------------------------------------------------

struct TamperLimits {
  double min_object_fraction = 0.01;
  double max_object_fraction = 0.5;
  double max_copy_move_overlap = 0.2;
  double max_removal_fraction = 0.3;
  bool feather = false;  // 1-pixel blend on the inner boundary of pasted regions
};

namespace detail {

inline bool area_ok(const Mask& m, int width, int height, const TamperLimits& lim) {
  const double frac = static_cast<double>(m.count()) / (static_cast<double>(width) * height);
  return frac >= lim.min_object_fraction && frac <= lim.max_object_fraction;
}

inline bool on_inner_boundary(const Mask& m, int x, int y) {
  const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
  for (int k = 0; k < 4; ++k) {
    const int nx = x + dx[k], ny = y + dy[k];
    if (nx < 0 || ny < 0 || nx >= m.width || ny >= m.height || !m.at(nx, ny)) return true;
  }
  return false;
}

// Copies src pixels under `mask` to dst shifted by p; dst_mask is the moved mask.
inline void paste(const Image& src, const Mask& mask, Placement p, const Mask& dst_mask, Image& dst, bool feather) {
  const Image before = feather ? dst : Image{};
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      const int nx = x + p.dx, ny = y + p.dy;
      const bool blend = feather && on_inner_boundary(dst_mask, nx, ny);
      for (int c = 0; c < 3; ++c) {
        const int v = src.at(x, y, c);
        dst.at(nx, ny, c) = blend ? static_cast<std::uint8_t>((v + before.at(nx, ny, c) + 1) / 2)
                                  : static_cast<std::uint8_t>(v);
      }
    }
}

}  // namespace detail

/// Pastes object `object_index` of `source` onto `target`. nullopt (retry) when
/// the object is outside the size limits or leaves the target.
inline std::optional<TamperSample> make_splice(const SourceRecord& source, std::size_t object_index,
                                               const Image& target, const std::string& target_background,
                                               Placement placement, const TamperLimits& lim = {}) {
  const ObjectInstance& obj = source.objects.at(object_index);
  if (!detail::area_ok(obj.mask, target.width, target.height, lim)) return std::nullopt;
  auto moved = translate_mask(obj.mask, placement, target.width, target.height);
  if (!moved) return std::nullopt;
  TamperSample s;
  s.image = target;
  detail::paste(source.image, obj.mask, placement, *moved, s.image, lim.feather);
  s.mask = std::move(*moved);
  s.boxes = labeled_boxes(s.mask, "splice");
  s.technique = "splice";
  s.provenance = {obj.object_id, target_background};
  return s;
}

/// Duplicates the object's region at `offset` within the same image. The ground
/// truth marks the pasted copy only.
inline std::optional<TamperSample> make_copy_move(const Image& image, const std::string& background_id,
                                                  const ObjectInstance& obj, Placement offset,
                                                  const TamperLimits& lim = {}) {
  if (offset.dx == 0 && offset.dy == 0) return std::nullopt;
  if (!detail::area_ok(obj.mask, image.width, image.height, lim)) return std::nullopt;
  auto moved = translate_mask(obj.mask, offset, image.width, image.height);
  if (!moved) return std::nullopt;
  std::size_t overlap = 0;
  for (std::size_t i = 0; i < moved->bits.size(); ++i) overlap += moved->bits[i] && obj.mask.bits[i];
  if (static_cast<double>(overlap) >= lim.max_copy_move_overlap * static_cast<double>(obj.mask.count()))
    return std::nullopt;
  TamperSample s;
  s.image = image;
  detail::paste(image, obj.mask, offset, *moved, s.image, lim.feather);
  s.mask = std::move(*moved);
  s.boxes = labeled_boxes(s.mask, "copy_move");
  s.technique = "copy_move";
  s.provenance = {obj.object_id, background_id};
  return s;
}

/// Fills the masked pixels in layers: each pass sets every unknown pixel with at
/// least one known 4-neighbor to the mean of those neighbors (read from the
/// previous pass). A 3x3 box blur inside the mask follows.
inline Image inpaint_diffusion(const Image& image, const Mask& mask) {
  if (mask.width != image.width || mask.height != image.height)
    throw std::invalid_argument("inpaint: mask and image sizes differ");
  const int w = image.width, h = image.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (mask.count() == n) throw std::invalid_argument("inpaint: mask covers the whole image");
  std::vector<double> cur(image.pixels.begin(), image.pixels.end());
  std::vector<char> known(n);
  std::size_t unknown = 0;
  for (std::size_t i = 0; i < n; ++i) {
    known[i] = !mask.bits[i];
    unknown += !known[i];
  }
  const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
  while (unknown > 0) {
    auto next = cur;
    auto next_known = known;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (known[i]) continue;
        double sum[3] = {0, 0, 0};
        int cnt = 0;
        for (int k = 0; k < 4; ++k) {
          const int nx = x + dx[k], ny = y + dy[k];
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
          if (!known[j]) continue;
          for (int c = 0; c < 3; ++c) sum[c] += cur[j * 3 + c];
          ++cnt;
        }
        if (cnt == 0) continue;
        for (int c = 0; c < 3; ++c) next[i * 3 + c] = sum[c] / cnt;
        next_known[i] = 1;
        --unknown;
      }
    cur.swap(next);
    known.swap(next_known);
  }
  Image out = image;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!mask.bits[i]) {
        continue;
      }
      for (int c = 0; c < 3; ++c) {
        double sum = 0;
        int cnt = 0;
        for (int yy = std::max(0, y - 1); yy <= std::min(h - 1, y + 1); ++yy)
          for (int xx = std::max(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx) {
            sum += cur[(static_cast<std::size_t>(yy) * w + xx) * 3 + c];
            ++cnt;
          }
        out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(sum / cnt), 0L, 255L));
      }
    }
  return out;
}

/// Erases the object and inpaints it. nullopt when the mask is empty or above the
/// removal limit; a mask covering the whole image is an error.
inline std::optional<TamperSample> make_removal(const Image& image, const std::string& background_id,
                                                const ObjectInstance& obj, const TamperLimits& lim = {}) {
  const std::size_t area = obj.mask.count();
  const std::size_t total = static_cast<std::size_t>(image.width) * image.height;
  if (area == total) throw std::invalid_argument("removal: mask covers the whole image");
  if (area == 0 || static_cast<double>(area) > lim.max_removal_fraction * static_cast<double>(total))
    return std::nullopt;
  TamperSample s;
  s.image = inpaint_diffusion(image, obj.mask);
  s.mask = obj.mask;
  s.boxes = labeled_boxes(s.mask, "removal");
  s.technique = "removal";
  s.provenance = {obj.object_id, background_id};
  return s;
}

inline TamperSample make_authentic(const SourceRecord& rec) {
  TamperSample s;
  s.image = rec.image;
  s.mask = Mask(rec.image.width, rec.image.height);
  s.technique = "authentic";
  s.provenance = {"", rec.background_id};
  return s;
}

// --- procedural corpus -------------------------------------------------------------------

struct ProceduralCorpusOptions {
  int width = 128;
  int height = 128;
  double min_sigma = 0.5;  // per-image sensor noise
  double max_sigma = 8.0;
  int min_side = 20;
  int max_side = 56;
  int max_objects = 2;
};

namespace detail {

struct Shape2d {
  int kind;  // 0 ellipse, 1 rotated rectangle, 2 triangle
  double cx, cy, a, b, angle;
  double tx[3], ty[3];

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (x - cx) * c + (y - cy) * s, v = -(x - cx) * s + (y - cy) * c;
    if (kind == 0) return (u * u) / (a * a) + (v * v) / (b * b) <= 1;
    if (kind == 1) return std::abs(u) <= a && std::abs(v) <= b;
    auto side = [&](int i, int j) { return (tx[j] - tx[i]) * (y - ty[i]) - (ty[j] - ty[i]) * (x - tx[i]); };
    const double d0 = side(0, 1), d1 = side(1, 2), d2 = side(2, 0);
    return (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
  }
};

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

/// One smooth background with 1..max_objects textured, antialiased shapes and
/// additive Gaussian sensor noise of a per-image sigma.
inline SourceRecord make_procedural_image(std::size_t index, std::uint64_t seed,
                                          const ProceduralCorpusOptions& opt = {}) {
  std::mt19937_64 rng(derive_seed(seed, index));
  std::uniform_real_distribution<double> u01(0, 1);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const int w = opt.width, h = opt.height;
  std::vector<double> px(static_cast<std::size_t>(w) * h * 3);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = uni(50, 200);
    gx[c] = uni(-0.5, 0.5);
    gy[c] = uni(-0.5, 0.5);
  }
  const double fx = uni(0.01, 0.05), fy = uni(0.01, 0.05), ph = uni(0, 6.283), amp = uni(5, 20);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        px[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            base[c] + gx[c] * (x - w / 2.0) + gy[c] * (y - h / 2.0) + amp * std::sin(fx * x + fy * y + ph + c);

  SourceRecord rec;
  rec.background_id = "bg" + std::to_string(index);
  const int n_obj = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(opt.max_objects));
  Mask occupied(w, h);
  for (int k = 0; k < n_obj; ++k) {
    detail::Shape2d sh{};
    sh.kind = static_cast<int>(rng() % 3);
    const double sw = uni(opt.min_side, opt.max_side), shh = uni(opt.min_side, opt.max_side);
    sh.cx = uni(sw / 2 + 1, w - sw / 2 - 1);
    sh.cy = uni(shh / 2 + 1, h - shh / 2 - 1);
    sh.a = sw / 2;
    sh.b = shh / 2;
    sh.angle = sh.kind == 1 ? uni(-0.4, 0.4) : 0.0;
    if (sh.kind == 1) {
      // shrink so the rotated rectangle stays inside its sw x shh cell
      const double c = std::abs(std::cos(sh.angle)), s = std::abs(std::sin(sh.angle));
      const double k = std::min(sh.a / (sh.a * c + sh.b * s), sh.b / (sh.a * s + sh.b * c));
      sh.a *= k;
      sh.b *= k;
    }
    for (int v = 0; v < 3; ++v) {
      const double t = 6.283 * v / 3 + uni(-0.5, 0.5);
      sh.tx[v] = sh.cx + sh.a * std::cos(t);
      sh.ty[v] = sh.cy + sh.b * std::sin(t);
    }
    // 4x4 supersampled coverage; the mask keeps pixels at least half covered.
    Mask m(w, h);
    std::vector<double> cover(static_cast<std::size_t>(w) * h, 0.0);
    bool clash = false;
    for (int y = 0; y < h && !clash; ++y)
      for (int x = 0; x < w; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) hits += sh.contains(x + (sx + 0.5) / 4, y + (sy + 0.5) / 4);
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        cover[i] = hits / 16.0;
        if (hits >= 8) {
          if (occupied.bits[i]) {
            clash = true;
            break;
          }
          m.bits[i] = 1;
        }
      }
    if (clash || m.count() == 0) continue;
    double col[3];
    for (double& c : col) c = uni(20, 235);
    const double dir = uni(0, 3.1416), period = uni(6, 14), tex = uni(10, 30);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (cover[i] == 0) continue;
        const double stripe = tex * std::sin(6.283 * (x * std::cos(dir) + y * std::sin(dir)) / period);
        for (int c = 0; c < 3; ++c) {
          double& p = px[i * 3 + c];
          p = (1 - cover[i]) * p + cover[i] * (col[c] + stripe);
        }
      }
    for (std::size_t i = 0; i < m.bits.size(); ++i) occupied.bits[i] |= m.bits[i];
    rec.objects.push_back({"img" + std::to_string(index) + "_obj" + std::to_string(rec.objects.size()), std::move(m)});
  }
  rec.noise_sigma = uni(opt.min_sigma, opt.max_sigma);
  std::normal_distribution<double> noise(0.0, rec.noise_sigma);
  rec.image = Image(w, h);
  for (std::size_t i = 0; i < px.size(); ++i) rec.image.pixels[i] = detail::to_byte(px[i] + noise(rng));
  return rec;
}

inline std::vector<SourceRecord> make_procedural_corpus(std::size_t count, std::uint64_t seed,
                                                        const ProceduralCorpusOptions& opt = {},
                                                        std::size_t jobs = 1) {
  std::vector<SourceRecord> out(count);
  parallel_for(count, jobs, [&](std::size_t i) { out[i] = make_procedural_image(i, seed, opt); });
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/img_%05zu.png", i);
    out[i].image_path = name;
  }
  return out;
}

// --- corpus on disk ---------------------------------------------------------------------------

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Even-odd fill evaluated at pixel centers.
inline Mask rasterize_polygon(const std::vector<std::pair<double, double>>& poly, int w, int h) {
  Mask m(w, h);
  const std::size_t n = poly.size();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      m.at(x, y) = inside;
    }
  return m;
}

}  // namespace detail

/// Writes images/, masks/ and index.json (one entry per object instance).
inline void write_corpus(const std::vector<SourceRecord>& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (const auto& rec : corpus) {
    write_png((dir / rec.image_path).string(), rec.image);
    for (const auto& obj : rec.objects) {
      const std::string mask_rel = "masks/" + obj.object_id + ".png";
      write_png((dir / mask_rel).string(), obj.mask);
      nlohmann::ordered_json e;
      e["image"] = rec.image_path;
      e["object_id"] = obj.object_id;
      e["mask"] = mask_rel;
      e["background_id"] = rec.background_id;
      e["noise_sigma"] = rec.noise_sigma;
      index.push_back(std::move(e));
    }
  }
  std::ofstream os(dir / "index.json", std::ios::binary);
  os << index.dump(1) << '\n';
  if (!os) throw ImageIoError("cannot write " + (dir / "index.json").string());
}

/// Reads index.json: an array of {image, object_id, mask | polygon,
/// background_id?, noise_sigma?}. Instances of the same image are grouped; the
/// background id defaults to the image path.
inline std::vector<SourceRecord> load_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "index.json", std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + (dir / "index.json").string());
  nlohmann::json index;
  try {
    is >> index;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("corpus index: " + std::string(e.what()));
  }
  if (index.is_object() && index.contains("instances")) index = index["instances"];
  if (!index.is_array()) throw ManifestError("corpus index: expected an array of instances");
  std::vector<SourceRecord> out;
  std::map<std::string, std::size_t> by_image;
  std::set<std::string> ids;
  for (std::size_t k = 0; k < index.size(); ++k) {
    const auto& e = index[k];
    const std::string where = "corpus index entry " + std::to_string(k);
    if (!e.is_object() || !e.contains("image") || !e.contains("object_id"))
      throw ManifestError(where + ": needs image and object_id");
    const std::string image = e["image"].get<std::string>();
    auto it = by_image.find(image);
    if (it == by_image.end()) {
      SourceRecord rec;
      rec.image_path = image;
      rec.image = read_png_image((dir / image).string());
      rec.background_id = e.value("background_id", image);
      rec.noise_sigma = e.value("noise_sigma", 0.0);
      it = by_image.emplace(image, out.size()).first;
      out.push_back(std::move(rec));
    }
    SourceRecord& rec = out[it->second];
    ObjectInstance obj;
    obj.object_id = e["object_id"].is_string() ? e["object_id"].get<std::string>() : e["object_id"].dump();
    if (!ids.insert(obj.object_id).second) throw ManifestError(where + ": duplicate object id " + obj.object_id);
    if (e.contains("mask")) {
      obj.mask = read_png_mask((dir / e["mask"].get<std::string>()).string());
    } else if (e.contains("polygon")) {
      std::vector<std::pair<double, double>> poly;
      for (const auto& p : e["polygon"]) poly.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      if (poly.size() < 3) throw ManifestError(where + ": polygon needs at least 3 points");
      obj.mask = detail::rasterize_polygon(poly, rec.image.width, rec.image.height);
    } else {
      throw ManifestError(where + ": needs mask or polygon");
    }
    if (obj.mask.width != rec.image.width || obj.mask.height != rec.image.height)
      throw ManifestError(where + ": mask size differs from image");
    rec.objects.push_back(std::move(obj));
  }
  return out;
}

// --- split ------------------------------------------------------------------------------

enum class Split { train, test, dropped };

/// Background ids are moved to test one at a time (in shuffled order); each
/// object id follows the split holding most of its samples (ties to train).
/// Samples whose object and background land on different sides are dropped.
/// Stops once test holds `test_fraction` of the kept samples.
template <typename Rng>
std::vector<Split> split_train_test(const std::vector<Provenance>& prov, double test_fraction, Rng& rng) {
  if (test_fraction < 0 || test_fraction >= 1) throw std::invalid_argument("split: test fraction must be in [0,1)");
  std::vector<Split> out(prov.size(), Split::train);
  if (prov.empty() || test_fraction == 0) return out;
  std::vector<std::string> bgs;
  for (const auto& p : prov) bgs.push_back(p.background_id);
  std::sort(bgs.begin(), bgs.end());
  bgs.erase(std::unique(bgs.begin(), bgs.end()), bgs.end());
  std::shuffle(bgs.begin(), bgs.end(), rng);
  std::set<std::string> test_bgs;
  auto assign = [&]() {
    std::map<std::string, long> vote;
    for (const auto& p : prov)
      if (!p.object_id.empty()) vote[p.object_id] += test_bgs.count(p.background_id) ? 1 : -1;
    std::size_t n_test = 0, n_train = 0;
    for (std::size_t i = 0; i < prov.size(); ++i) {
      const bool bg_test = test_bgs.count(prov[i].background_id) > 0;
      const bool obj_test = prov[i].object_id.empty() ? bg_test : vote[prov[i].object_id] > 0;
      out[i] = bg_test != obj_test ? Split::dropped : (bg_test ? Split::test : Split::train);
      n_test += out[i] == Split::test;
      n_train += out[i] == Split::train;
    }
    return std::pair{n_test, n_train};
  };
  std::size_t n_test = 0, n_train = prov.size();
  for (const auto& bg : bgs) {
    if (n_test + n_train > 0 && static_cast<double>(n_test) >= test_fraction * static_cast<double>(n_test + n_train))
      break;
    test_bgs.insert(bg);
    std::tie(n_test, n_train) = assign();
  }
  if (n_test == 0 || n_train == 0)
    throw std::runtime_error("split: corpus too small for disjoint train/test sets (" + std::to_string(prov.size()) +
                             " samples, " + std::to_string(bgs.size()) + " backgrounds)");
  return out;
}

// --- generation -------------------------------------------------------------------------

struct GenerateOptions {
  std::size_t count = 0;  // tampered samples
  std::vector<std::string> techniques = tamper_techniques();
  std::uint64_t seed = 0;
  double test_fraction = 0.1;
  bool authentic = true;  // one authentic record per used background
  std::size_t jobs = 1;
  std::size_t max_attempts = 200;
  TamperLimits limits;
};

/// Sample i uses technique techniques[i % n] and its own derived seed, so the
/// result does not depend on --jobs.
inline std::optional<TamperSample> generate_one(const std::vector<SourceRecord>& corpus, const std::string& technique,
                                                std::mt19937_64& rng, const TamperLimits& lim) {
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  const SourceRecord& rec = corpus[pick(rng)];
  if (rec.objects.empty()) return std::nullopt;
  const ObjectInstance& obj = rec.objects[rng() % rec.objects.size()];
  if (technique == "splice") {
    if (corpus.size() < 2) throw std::runtime_error("splice: corpus needs at least two images");
    std::size_t t = pick(rng);
    if (corpus[t].background_id == rec.background_id) return std::nullopt;
    const auto& target = corpus[t];
    const std::size_t oi = static_cast<std::size_t>(&obj - rec.objects.data());
    auto p = random_placement(obj.mask, target.image.width, target.image.height, rng);
    if (!p) return std::nullopt;
    return make_splice(rec, oi, target.image, target.background_id, *p, lim);
  }
  if (technique == "copy_move") {
    auto p = random_placement(obj.mask, rec.image.width, rec.image.height, rng);
    if (!p) return std::nullopt;
    return make_copy_move(rec.image, rec.background_id, obj, *p, lim);
  }
  if (technique == "removal") return make_removal(rec.image, rec.background_id, obj, lim);
  throw std::invalid_argument("unknown technique '" + technique + "'");
}

/// Tampered samples, then authentic counterparts, with split labels assigned and
/// dropped samples removed.
inline std::vector<TamperSample> generate_dataset(const std::vector<SourceRecord>& corpus, const GenerateOptions& opt) {
  for (const auto& t : opt.techniques)
    if (std::find(tamper_techniques().begin(), tamper_techniques().end(), t) == tamper_techniques().end())
      throw std::invalid_argument("unknown technique '" + t + "'");
  if (opt.count == 0) return {};
  if (corpus.empty()) throw std::invalid_argument("generate: empty corpus");
  if (opt.techniques.empty()) throw std::invalid_argument("generate: no techniques");
  std::vector<TamperSample> tampered(opt.count);
  parallel_for(opt.count, opt.jobs, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(opt.seed, i));
    const std::string& tech = opt.techniques[i % opt.techniques.size()];
    for (std::size_t attempt = 0; attempt < opt.max_attempts; ++attempt) {
      if (auto s = generate_one(corpus, tech, rng, opt.limits)) {
        tampered[i] = std::move(*s);
        return;
      }
    }
    throw std::runtime_error("generate: no valid " + tech + " sample for index " + std::to_string(i) + " after " +
                             std::to_string(opt.max_attempts) + " attempts");
  });
  std::vector<TamperSample> all = std::move(tampered);
  if (opt.authentic) {
    std::map<std::string, const SourceRecord*> by_bg;
    for (const auto& r : corpus) by_bg.emplace(r.background_id, &r);
    std::set<std::string> done;
    const std::size_t n = all.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::string bg = all[i].provenance.background_id;
      if (!done.insert(bg).second) continue;
      all.push_back(make_authentic(*by_bg.at(bg)));
    }
  }
  std::vector<Provenance> prov;
  for (const auto& s : all) prov.push_back(s.provenance);
  std::mt19937_64 split_rng(derive_seed(opt.seed, ~std::uint64_t{0}));
  const auto splits = split_train_test(prov, opt.test_fraction, split_rng);
  std::vector<TamperSample> kept;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (splits[i] == Split::dropped) continue;
    all[i].split = splits[i] == Split::test ? "test" : "train";
    kept.push_back(std::move(all[i]));
  }
  return kept;
}

// --- augmentation and attacks ------------------------------------------------------------------

struct AugmentSpec {
  enum class Kind { flip, jpeg, noise } kind = Kind::flip;
  double value = 0;  // JPEG quality or noise variance

  /// "flip", "jpeg<Q>", "noise<variance>".
  static AugmentSpec parse(const std::string& s) {
    if (s == "flip") return {Kind::flip, 0};
    if (s.rfind("jpeg", 0) == 0) return {Kind::jpeg, std::stod(s.substr(4))};
    if (s.rfind("noise", 0) == 0) return {Kind::noise, std::stod(s.substr(5))};
    throw std::invalid_argument("unknown augmentation '" + s + "'");
  }
};

namespace detail {
inline int checked_quality(double q) {
  if (!(q >= 1 && q <= 100) || q != std::floor(q))
    throw std::invalid_argument("JPEG quality must be an integer in [1,100], got " + std::to_string(q));
  return static_cast<int>(q);
}
}  // namespace detail

inline TamperSample flip_sample(const TamperSample& s) {
  TamperSample out = s;
  out.image = flip_horizontal(s.image);
  out.mask = flip_horizontal(s.mask);
  const double w = s.image.width;
  for (auto& b : out.boxes) b.box = {w - b.box.x2, b.box.y1, w - b.box.x1, b.box.y2};
  return out;
}

template <typename Rng>
TamperSample augment(const TamperSample& s, const AugmentSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case AugmentSpec::Kind::flip:
      return flip_sample(s);
    case AugmentSpec::Kind::jpeg: {
      TamperSample out = s;
      out.image = jpeg_roundtrip(s.image, detail::checked_quality(spec.value));
      return out;
    }
    case AugmentSpec::Kind::noise: {
      if (spec.value < 0) throw std::invalid_argument("noise variance must be nonnegative");
      TamperSample out = s;
      std::normal_distribution<double> g(0.0, std::sqrt(spec.value));
      for (auto& p : out.image.pixels) p = detail::to_byte(p + g(rng));
      return out;
    }
  }
  return s;
}

struct AttackSpec {
  enum class Kind { jpeg, resize } kind = Kind::jpeg;
  double value = 0;

  /// "jpeg<Q>" or "resize<scale>".
  static AttackSpec parse(const std::string& s) {
    AttackSpec a;
    try {
      if (s.rfind("jpeg", 0) == 0) {
        a = {Kind::jpeg, std::stod(s.substr(4))};
        detail::checked_quality(a.value);
        return a;
      }
      if (s.rfind("resize", 0) == 0) {
        a = {Kind::resize, std::stod(s.substr(6))};
        if (!(a.value > 0 && a.value <= 1)) throw std::invalid_argument("resize scale must be in (0,1]");
        return a;
      }
    } catch (const std::logic_error& e) {
      throw std::invalid_argument("bad attack '" + s + "': " + e.what());
    }
    throw std::invalid_argument("unknown attack '" + s + "'");
  }

  std::string name() const {
    std::ostringstream os;
    if (kind == Kind::jpeg)
      os << "jpeg" << static_cast<int>(value);
    else
      os << "resize" << value;
    return os.str();
  }
};

inline Image attack_image(const Image& img, const AttackSpec& a) {
  if (a.kind == AttackSpec::Kind::jpeg) return jpeg_roundtrip(img, detail::checked_quality(a.value));
  const int w = std::max(1, static_cast<int>(std::lround(img.width * a.value)));
  const int h = std::max(1, static_cast<int>(std::lround(img.height * a.value)));
  return resize_bilinear(img, w, h);
}

/// Attacked image; for resizing, the mask follows with nearest-neighbor and boxes are scaled.
inline TamperSample attack(const TamperSample& s, const AttackSpec& a) {
  TamperSample out = s;
  out.image = attack_image(s.image, a);
  if (a.kind == AttackSpec::Kind::resize && (out.image.width != s.image.width || out.image.height != s.image.height)) {
    out.mask = resize_nearest(s.mask, out.image.width, out.image.height);
    const double sx = static_cast<double>(out.image.width) / s.image.width;
    const double sy = static_cast<double>(out.image.height) / s.image.height;
    for (auto& b : out.boxes) b.box = {b.box.x1 * sx, b.box.y1 * sy, b.box.x2 * sx, b.box.y2 * sy};
  }
  return out;
}

// --- manifest ------------------------------------------------------------------------------------

struct ManifestRecord {
  std::string image;  // relative to the manifest's directory
  std::string mask;
  std::vector<LabeledBox> boxes;
  std::string technique;
  Provenance provenance;
  std::string split;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline std::string manifest_line(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["image"] = r.image;
  j["mask"] = r.mask;
  auto boxes = nlohmann::ordered_json::array();
  for (const auto& b : r.boxes)
    boxes.push_back({std::lround(b.box.x1), std::lround(b.box.y1), std::lround(b.box.x2), std::lround(b.box.y2),
                     b.label});
  j["boxes"] = std::move(boxes);
  j["technique"] = r.technique;
  j["provenance"] = {{"object_id", r.provenance.object_id}, {"background_id", r.provenance.background_id}};
  j["split"] = r.split;
  return j.dump();
}

inline ManifestRecord parse_manifest_line(const std::string& line, std::size_t line_no) {
  const std::string where = "manifest line " + std::to_string(line_no) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ManifestError(where + "invalid JSON (" + e.what() + ")");
  }
  try {
    ManifestRecord r;
    r.image = j.at("image").get<std::string>();
    r.mask = j.at("mask").get<std::string>();
    for (const auto& b : j.at("boxes")) {
      if (!b.is_array() || b.size() != 5) throw ManifestError(where + "box must be [x1,y1,x2,y2,label]");
      r.boxes.push_back({{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                         b[4].get<std::string>()});
    }
    r.technique = j.at("technique").get<std::string>();
    if (!is_known_technique(r.technique)) throw ManifestError(where + "unknown technique '" + r.technique + "'");
    const auto& p = j.at("provenance");
    r.provenance = {p.at("object_id").get<std::string>(), p.at("background_id").get<std::string>()};
    r.split = j.at("split").get<std::string>();
    if (r.split != "train" && r.split != "test") throw ManifestError(where + "split must be train or test");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(where + e.what());
  }
}

inline void write_manifest(const std::vector<ManifestRecord>& records, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageIoError("cannot write " + path);
  for (const auto& r : records) os << manifest_line(r) << '\n';
  if (!os) throw ImageIoError("write failed: " + path);
}

/// Blank lines are skipped; any malformed line raises ManifestError naming it.
inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_manifest_line(line, no));
  }
  return out;
}

/// Writes images/NNNNNN.png, masks/NNNNNN.png and manifest.jsonl under `dir`.
inline std::vector<ManifestRecord> write_dataset(const std::vector<TamperSample>& samples,
                                                 const std::filesystem::path& dir, std::size_t jobs = 1) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::vector<ManifestRecord> records(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    const auto& s = samples[i];
    ManifestRecord r{std::string("images/") + name, std::string("masks/") + name, s.boxes, s.technique,
                     s.provenance, s.split};
    write_png((dir / r.image).string(), s.image);
    write_png((dir / r.mask).string(), s.mask);
    records[i] = std::move(r);
  });
  write_manifest(records, (dir / "manifest.jsonl").string());
  return records;
}

inline TamperSample load_sample(const ManifestRecord& r, const std::filesystem::path& base) {
  TamperSample s;
  s.image = read_png_image((base / r.image).string());
  s.mask = read_png_mask((base / r.mask).string());
  if (s.mask.width != s.image.width || s.mask.height != s.image.height)
    throw ManifestError("mask " + r.mask + " does not match image size");
  s.boxes = r.boxes;
  s.technique = r.technique;
  s.provenance = r.provenance;
  s.split = r.split;
  return s;
}

}  // namespace tamperlab
