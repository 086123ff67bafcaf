#pragma once

// Optional on-disk cache of noise maps, enabled by the TAMPERLAB_CACHE
// directory. Entries are keyed by a hash of the image pixels.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <system_error>

#include "tamperlab/checkpoint.hpp"
#include "tamperlab/image.hpp"
#include "tamperlab/srm.hpp"

namespace tamperlab {

/// FNV-1a over the dimensions and pixel bytes.
inline std::uint64_t image_hash(const Image& img) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  for (int v : {img.width, img.height})
    for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>(static_cast<std::uint32_t>(v) >> (8 * i)));
  for (std::uint8_t p : img.pixels) mix(p);
  return h;
}

inline std::string noise_cache_dir() {
  const char* d = std::getenv("TAMPERLAB_CACHE");
  return d ? std::string(d) : std::string();
}

/// apply_srm, reading and writing `dir` when it is nonempty. A corrupt or
/// mismatched entry is recomputed and replaced.
inline NoiseMap cached_noise_map(const Image& img, const std::string& dir = noise_cache_dir()) {
  if (dir.empty()) return apply_srm(img);
  char name[32];
  std::snprintf(name, sizeof name, "%016llx.srm", static_cast<unsigned long long>(image_hash(img)));
  const std::filesystem::path path = std::filesystem::path(dir) / name;
  std::error_code ec;
  if (std::filesystem::exists(path, ec)) {
    try {
      auto t = load_checkpoint(path.string());
      if (t.size() == 1 && t[0].tensor.shape() == Shape{3, static_cast<std::size_t>(img.height),
                                                         static_cast<std::size_t>(img.width)})
        return std::move(t[0].tensor);
    } catch (const CheckpointError&) {
    }
  }
  NoiseMap n = apply_srm(img);
  std::filesystem::create_directories(dir, ec);
  // write then rename so concurrent readers never see a partial file
  const std::filesystem::path tmp = path.string() + ".tmp" + std::to_string(reinterpret_cast<std::uintptr_t>(&n));
  try {
    save_checkpoint(tmp.string(), {{"noise", n}});
    std::filesystem::rename(tmp, path, ec);
  } catch (const CheckpointError&) {
  }
  std::filesystem::remove(tmp, ec);
  return n;
}

}  // namespace tamperlab
