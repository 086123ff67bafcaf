#pragma once

// Run configuration: plain key=value text, command-line overrides, dump.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <type_traits>
#include <vector>

#include "tamperlab/detector.hpp"
#include "tamperlab/train.hpp"

namespace tamperlab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  DetectorConfig detector;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool verbose = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <typename U>
U parse_unsigned(const std::string& s) {
  U v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("not a nonnegative integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

template <typename U>
std::string join(const std::vector<U>& v, const std::function<std::string(const U&)>& fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define TAMPERLAB_DOUBLE_KEY(name, expr) \
  ConfigKey { name, [](const RunConfig& c) { return format_double(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); } }
#define TAMPERLAB_SIZE_KEY(name, expr) \
  ConfigKey { name, [](const RunConfig& c) { return std::to_string(c.expr); }, [](RunConfig& c, const std::string& v) { c.expr = parse_unsigned<std::decay_t<decltype(c.expr)>>(v); } }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      TAMPERLAB_SIZE_KEY("seed", seed),
      TAMPERLAB_SIZE_KEY("jobs", jobs),
      {"verbose", [](const RunConfig& c) { return std::string(c.verbose ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.verbose = parse_bool(v); }},
      {"mode", [](const RunConfig& c) { return to_string(c.detector.mode); },
       [](RunConfig& c, const std::string& v) {
         if (v == "two_class") c.detector.mode = ClassMode::two_class;
         else if (v == "multi_class") c.detector.mode = ClassMode::multi_class;
         else throw ConfigError("mode must be two_class or multi_class");
       }},
      {"streams", [](const RunConfig& c) { return to_string(c.detector.streams); },
       [](RunConfig& c, const std::string& v) {
         if (v == "two_stream") c.detector.streams = StreamMode::two_stream;
         else if (v == "rgb_only") c.detector.streams = StreamMode::rgb_only;
         else if (v == "noise_only") c.detector.streams = StreamMode::noise_only;
         else throw ConfigError("streams must be two_stream, rgb_only or noise_only");
       }},
      {"fusion", [](const RunConfig& c) { return to_string(c.detector.fusion); },
       [](RunConfig& c, const std::string& v) {
         if (v == "auto") c.detector.fusion = FusionType::automatic;
         else if (v == "bilinear") c.detector.fusion = FusionType::bilinear;
         else if (v == "compact") c.detector.fusion = FusionType::compact;
         else throw ConfigError("fusion must be auto, bilinear or compact");
       }},
      {"backbone_channels",
       [](const RunConfig& c) {
         return join<std::size_t>(c.detector.backbone.channels, [](const std::size_t& v) { return std::to_string(v); });
       },
       [](RunConfig& c, const std::string& v) {
         c.detector.backbone.channels.clear();
         for (const auto& s : split_list(v)) c.detector.backbone.channels.push_back(parse_unsigned<std::size_t>(s));
       }},
      TAMPERLAB_SIZE_KEY("input_side", detector.backbone.input_side),
      TAMPERLAB_SIZE_KEY("sketch_dim", detector.sketch_dim),
      TAMPERLAB_SIZE_KEY("sketch_seed", detector.sketch_seed),
      {"anchor_scales",
       [](const RunConfig& c) { return join<double>(c.detector.anchor_scales, format_double); },
       [](RunConfig& c, const std::string& v) {
         c.detector.anchor_scales.clear();
         for (const auto& s : split_list(v)) c.detector.anchor_scales.push_back(parse_double(s));
       }},
      {"anchor_ratios",
       [](const RunConfig& c) { return join<double>(c.detector.anchor_ratios, format_double); },
       [](RunConfig& c, const std::string& v) {
         c.detector.anchor_ratios.clear();
         for (const auto& s : split_list(v)) c.detector.anchor_ratios.push_back(parse_double(s));
       }},
      TAMPERLAB_DOUBLE_KEY("lambda", detector.lambda),
      TAMPERLAB_DOUBLE_KEY("iou_pos", detector.iou_positive),
      TAMPERLAB_DOUBLE_KEY("iou_neg", detector.iou_negative),
      TAMPERLAB_SIZE_KEY("rpn_batch", detector.rpn_batch),
      TAMPERLAB_SIZE_KEY("proposals_train", detector.proposals_train),
      TAMPERLAB_SIZE_KEY("proposals_test", detector.proposals_test),
      TAMPERLAB_SIZE_KEY("pre_nms_top", detector.pre_nms_top),
      TAMPERLAB_DOUBLE_KEY("rpn_nms", detector.rpn_nms),
      TAMPERLAB_DOUBLE_KEY("min_proposal_side", detector.min_proposal_side),
      TAMPERLAB_SIZE_KEY("roi_size", detector.roi_size),
      TAMPERLAB_DOUBLE_KEY("roi_fg_iou", detector.roi_fg_iou),
      TAMPERLAB_SIZE_KEY("roi_batch", detector.roi_batch),
      TAMPERLAB_DOUBLE_KEY("roi_fg_fraction", detector.roi_fg_fraction),
      TAMPERLAB_SIZE_KEY("hidden", detector.hidden),
      TAMPERLAB_DOUBLE_KEY("nms", detector.nms),
      TAMPERLAB_DOUBLE_KEY("score_floor", detector.score_floor),
      TAMPERLAB_DOUBLE_KEY("enlarge_pad", detector.enlarge_pad),
      {"steps", [](const RunConfig& c) { return std::to_string(c.train.steps); },
       [](RunConfig& c, const std::string& v) { c.train.steps = static_cast<long>(parse_unsigned<unsigned long>(v)); }},
      TAMPERLAB_DOUBLE_KEY("lr", train.sgd.learning_rate),
      {"decay_step", [](const RunConfig& c) { return std::to_string(c.train.sgd.decay_step); },
       [](RunConfig& c, const std::string& v) {
         c.train.sgd.decay_step = static_cast<long>(parse_unsigned<unsigned long>(v));
       }},
      TAMPERLAB_DOUBLE_KEY("lr_decayed", train.sgd.decayed_rate),
      TAMPERLAB_DOUBLE_KEY("momentum", train.sgd.momentum),
      TAMPERLAB_DOUBLE_KEY("fused_cls_lr_mult", train.fused_cls_lr_mult),
      {"augment", [](const RunConfig& c) { return std::string(c.train.flip ? "flip" : "none"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "flip") c.train.flip = true;
         else if (v == "none") c.train.flip = false;
         else throw ConfigError("augment must be flip or none");
       }},
  };
  return keys;
}

#undef TAMPERLAB_DOUBLE_KEY
#undef TAMPERLAB_SIZE_KEY

}  // namespace detail

/// Sets one key; throws ConfigError naming the key on unknown keys or bad values.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      try {
        k.set(cfg, detail::trim(value));
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

/// "key=value" as given on the command line.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value, got '" + assignment + "'");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// One key=value per line; blank lines and lines starting with '#' are skipped.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      apply_override(cfg, t);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  apply_config_text(cfg, ss.str());
}

/// Every key in a fixed order; parsing the result reproduces `cfg`.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace tamperlab
