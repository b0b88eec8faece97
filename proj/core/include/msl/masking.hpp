#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

enum class MaskSubsetTag { low, high };

// Binary occlusion pattern. grid values are strictly {0,1}: 0 = removed
// pixel, 1 = kept. p is the percentage of zero pixels; masks with p > 50
// belong to the high subset, everything else (including exactly 50) to low.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> grid;
  double p = 0.0;
  MaskSubsetTag subset = MaskSubsetTag::low;
};

struct MaskGenParams {
  int strokes_min = 2;
  int strokes_max = 7;
  double brush_min = 4.0;
  double brush_max = 12.0;
  int holes_min = 0;
  int holes_max = 4;
  double hole_radius_min = 3.0;
  double hole_radius_max = 11.0;
};

struct MaskSubsets {
  std::vector<Mask> high;
  std::vector<Mask> low;
};

// Free-form grayscale mask in [0,1]: random-walk streaks plus elliptical
// holes carved out of an all-ones canvas, with a one-pixel soft rim so the
// result is genuinely gray before thresholding. Deterministic per seed.
std::vector<double> generate_irregular_mask(int height, int width,
                                            const MaskGenParams& params,
                                            uint64_t seed);

// value >= threshold keeps the pixel (1), below removes it (0).
Mask binarize(const std::vector<double>& raw, int height, int width,
              double threshold = 0.5);

// Generate height x width masks until both subsets hold count_per_subset
// members, discarding masks for a full subset. Fails once attempts exceed
// attempt_factor * 2 * count_per_subset.
MaskSubsets build_subsets(int count_per_subset, int height, int width,
                          const MaskGenParams& params, uint64_t seed,
                          int attempt_factor = 100);

// out[c,y,x] = image[c,y,x] * mask[y,x]; the input is left untouched.
Tensor apply_mask(const Tensor& image_chw, const Mask& mask);

const Mask& sample_mask(const MaskSubsets& subsets, MaskSubsetTag which,
                        Rng& rng);

// Write masks as 0/255 grayscale PNGs under dir/high and dir/low plus a
// manifest.jsonl row per mask (filename, p, subset).
void save_mask_subsets(const MaskSubsets& subsets,
                       const std::filesystem::path& dir);

// Load a directory written by save_mask_subsets, or any directory of 8-bit
// grayscale PNGs (no manifest): images are nearest-neighbor resized to
// height x width, thresholded at >= 128 and classified by p.
MaskSubsets load_mask_subsets(const std::filesystem::path& dir, int height,
                              int width);

}  // namespace msl
