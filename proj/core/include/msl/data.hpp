#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

// An image "contains a small object" when any object's max dimension is at
// most this many pixels (at 64x64), and "contains an occluded object" when
// any object has more than this fraction of its own pixels overdrawn.
inline constexpr int kSmallObjectMaxPx = 12;
inline constexpr double kOccludedMinFraction = 0.3;

struct ObjectMeta {
  int cls = 0;
  int size_px = 0;
  double occlusion = 0.0;  // fraction of own rasterized pixels overdrawn later
};

struct SampleRecord {
  std::string image_file;  // relative to the dataset directory
  std::vector<uint8_t> labels;
  std::vector<ObjectMeta> objects;
};

struct DatasetManifest {
  int k = 0;
  std::vector<std::string> class_names;
  std::string split;
  int height = 0;
  int width = 0;
  uint64_t seed = 0;
  std::string gen_params_json;
  std::filesystem::path root;
  std::vector<SampleRecord> records;

  bool has_small_object(size_t i) const;
  bool has_occluded_object(size_t i) const;
};

struct DatasetGenParams {
  int n = 100;
  int k = 8;
  int height = 64;
  int width = 64;
  int size_min = 6;
  int size_max = 28;
  int objects_min = 1;
  int objects_max = 4;
  std::string overlap = "target";  // "none" | "target"
  double occluded_target = 0.25;   // fraction of objects with occlusion > 0.3
  double noise_sigma = 0.03;
  uint64_t seed = 7;
};

// shape x color pairs; index order fixes the class ids
std::vector<std::string> class_vocabulary();

// Render n multi-object images (PNG under dir/images) and return the
// manifest. Deterministic given params.seed and split.
DatasetManifest generate_dataset(const DatasetGenParams& params,
                                 const std::filesystem::path& dir,
                                 const std::string& split);

// JSON-lines: first line is the header, then one record per line.
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& file);
DatasetManifest load_manifest(const std::filesystem::path& file);

// Decode every image to a [3,H,W] tensor in [0,1], in record order.
std::vector<Tensor> load_images(const DatasetManifest& manifest);

// Multi-hot label matrix [N,K].
Tensor labels_tensor(const DatasetManifest& manifest);

// Stack selected [C,H,W] images into one [N,C,H,W] batch.
Tensor stack_batch(const std::vector<Tensor>& images,
                   const std::vector<int>& indices);

// Deterministic augmentation core: optional horizontal flip, then a
// (crop_h, crop_w) window at (top, left) resized back bilinearly. A no-flip
// full-canvas crop is the exact identity.
Tensor augment_apply(const Tensor& image_chw, bool flip, int crop_h,
                     int crop_w, int top, int left);

// flip ~ Bernoulli(0.5); side scale ~ U[0.7, 1.0]; offsets uniform.
Tensor augment(const Tensor& image_chw, Rng& rng);

// Shuffled index batches covering 0..n-1 exactly once per epoch; the
// shuffle is a pure function of (seed, epoch).
std::vector<std::vector<int>> batch_indices(int n, int batch_size,
                                            uint64_t seed, int epoch);

}  // namespace msl
