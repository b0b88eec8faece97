#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace msl {

struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

// 8-bit PNG, fixed encoder settings so identical pixels give identical bytes.
void write_png(const std::filesystem::path& path, int width, int height,
               int channels, std::span<const uint8_t> pixels);

// Reads 8-bit gray or RGB; palette/alpha/16-bit inputs are converted.
ImageU8 read_png(const std::filesystem::path& path);

}  // namespace msl
