#include "msl/masking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "msl/image_io.hpp"

namespace msl {

namespace {

using nlohmann::json;

// Darken pixels within `radius` of (cy,cx); values between radius and
// radius+1 get a fractional rim so the raw mask stays properly grayscale.
void stamp_disc(std::vector<double>& canvas, int h, int w, double cy,
                double cx, double radius) {
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double dist = std::sqrt(dy * dy + dx * dx);
      double v;
      if (dist <= radius)
        v = 0.0;
      else if (dist < radius + 1.0)
        v = dist - radius;
      else
        continue;
      double& cell = canvas[static_cast<size_t>(y) * w + x];
      cell = std::min(cell, v);
    }
  }
}

void stamp_ellipse(std::vector<double>& canvas, int h, int w, double cy,
                   double cx, double ry, double rx) {
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + ry + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rx + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double ny = (y - cy) / ry, nx = (x - cx) / rx;
      const double r = std::sqrt(ny * ny + nx * nx);  // 1.0 at the boundary
      double v;
      if (r <= 1.0)
        v = 0.0;
      else {
        // map the normalized overshoot back to pixels via the mean radius
        const double rim = (r - 1.0) * 0.5 * (ry + rx);
        if (rim >= 1.0) continue;
        v = rim;
      }
      double& cell = canvas[static_cast<size_t>(y) * w + x];
      cell = std::min(cell, v);
    }
  }
}

std::string subset_name(MaskSubsetTag tag) {
  return tag == MaskSubsetTag::high ? "high" : "low";
}

}  // namespace

std::vector<double> generate_irregular_mask(int height, int width,
                                            const MaskGenParams& params,
                                            uint64_t seed) {
  if (height < 8 || width < 8)
    throw std::invalid_argument("generate_irregular_mask: canvas must be >= 8x8");
  if (params.strokes_min < 0 || params.strokes_max < params.strokes_min ||
      params.holes_min < 0 || params.holes_max < params.holes_min ||
      params.brush_max < params.brush_min || params.brush_min <= 0.0 ||
      params.hole_radius_max < params.hole_radius_min ||
      params.hole_radius_min <= 0.0)
    throw std::invalid_argument("generate_irregular_mask: degenerate ranges");

  Rng rng(mix64(seed, 0x6d61736bULL));
  std::vector<double> canvas(static_cast<size_t>(height) * width, 1.0);

  const int n_strokes = rng.uniform_int(params.strokes_min, params.strokes_max);
  for (int s = 0; s < n_strokes; ++s) {
    double y = rng.uniform(0.0, height);
    double x = rng.uniform(0.0, width);
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double brush = rng.uniform(params.brush_min, params.brush_max) / 2.0;
    const int steps = rng.uniform_int(6, 18);
    for (int t = 0; t < steps; ++t) {
      const double len = rng.uniform(2.0, 9.0);
      const double ny = y + len * std::sin(angle);
      const double nx = x + len * std::cos(angle);
      const int sub = std::max(2, static_cast<int>(len));
      for (int q = 0; q <= sub; ++q) {
        const double f = static_cast<double>(q) / sub;
        stamp_disc(canvas, height, width, y + (ny - y) * f, x + (nx - x) * f,
                   brush);
      }
      y = std::clamp(ny, 0.0, height - 1.0);
      x = std::clamp(nx, 0.0, width - 1.0);
      angle += rng.uniform(-0.9, 0.9);
    }
  }

  const int n_holes = rng.uniform_int(params.holes_min, params.holes_max);
  for (int hole = 0; hole < n_holes; ++hole) {
    const double cy = rng.uniform(0.0, height);
    const double cx = rng.uniform(0.0, width);
    const double ry = rng.uniform(params.hole_radius_min, params.hole_radius_max);
    const double rx = rng.uniform(params.hole_radius_min, params.hole_radius_max);
    stamp_ellipse(canvas, height, width, cy, cx, ry, rx);
  }
  return canvas;
}

Mask binarize(const std::vector<double>& raw, int height, int width,
              double threshold) {
  if (raw.size() != static_cast<size_t>(height) * width)
    throw std::invalid_argument("binarize: raw size does not match dimensions");
  Mask mask;
  mask.height = height;
  mask.width = width;
  mask.grid.resize(raw.size());
  int64_t zeros = 0;
  for (size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] < 0.0 || raw[i] > 1.0)
      throw std::invalid_argument("binarize: raw value outside [0,1]");
    const uint8_t bit = raw[i] >= threshold ? 1 : 0;
    mask.grid[i] = bit;
    zeros += bit == 0;
  }
  mask.p = 100.0 * static_cast<double>(zeros) / static_cast<double>(raw.size());
  mask.subset = mask.p > 50.0 ? MaskSubsetTag::high : MaskSubsetTag::low;
  return mask;
}

MaskSubsets build_subsets(int count_per_subset, int height, int width,
                          const MaskGenParams& params, uint64_t seed,
                          int attempt_factor) {
  if (count_per_subset < 1)
    throw std::invalid_argument("build_subsets: count_per_subset must be >= 1");
  MaskSubsets subsets;
  subsets.high.reserve(count_per_subset);
  subsets.low.reserve(count_per_subset);
  const int64_t budget =
      static_cast<int64_t>(attempt_factor) * 2 * count_per_subset;
  const size_t target = static_cast<size_t>(count_per_subset);
  for (int64_t attempt = 0; attempt < budget; ++attempt) {
    if (subsets.high.size() == target && subsets.low.size() == target)
      return subsets;
    Mask mask = binarize(
        generate_irregular_mask(height, width, params, mix64(seed, attempt)),
        height, width);
    auto& pool =
        mask.subset == MaskSubsetTag::high ? subsets.high : subsets.low;
    if (pool.size() < target) pool.push_back(std::move(mask));
  }
  if (subsets.high.size() == target && subsets.low.size() == target)
    return subsets;
  const char* short_side =
      subsets.high.size() < target ? "high" : "low";
  throw std::runtime_error(
      "build_subsets: exhausted " + std::to_string(budget) +
      " attempts before filling the " + short_side + " subset (" +
      std::to_string(subsets.high.size()) + " high / " +
      std::to_string(subsets.low.size()) + " low collected); adjust the "
      "generator ranges");
}

Tensor apply_mask(const Tensor& image_chw, const Mask& mask) {
  if (image_chw.shape().size() != 3)
    throw std::invalid_argument("apply_mask: image must be [C,H,W], got " +
                                shape_str(image_chw.shape()));
  const int c = image_chw.shape()[0];
  const int h = image_chw.shape()[1];
  const int w = image_chw.shape()[2];
  if (h != mask.height || w != mask.width)
    throw std::invalid_argument(
        "apply_mask: mask " + std::to_string(mask.height) + "x" +
        std::to_string(mask.width) + " does not match image " +
        std::to_string(h) + "x" + std::to_string(w));
  Tensor out = image_chw.copy();
  auto v = out.mutable_data();
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < plane; ++i)
      v[ch * plane + i] *= static_cast<double>(mask.grid[i]);
  return out;
}

const Mask& sample_mask(const MaskSubsets& subsets, MaskSubsetTag which,
                        Rng& rng) {
  const auto& pool =
      which == MaskSubsetTag::high ? subsets.high : subsets.low;
  if (pool.empty())
    throw std::runtime_error("sample_mask: " + subset_name(which) +
                             " subset is empty");
  return pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
}

void save_mask_subsets(const MaskSubsets& subsets,
                       const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "high");
  fs::create_directories(dir / "low");
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest)
    throw std::runtime_error("save_mask_subsets: cannot write manifest in " +
                             dir.string());
  auto dump = [&](const std::vector<Mask>& pool, MaskSubsetTag tag) {
    char name[64];
    for (size_t i = 0; i < pool.size(); ++i) {
      const Mask& mask = pool[i];
      std::snprintf(name, sizeof(name), "%s/mask_%05zu.png",
                    subset_name(tag).c_str(), i);
      std::vector<uint8_t> pixels(mask.grid.size());
      for (size_t j = 0; j < pixels.size(); ++j)
        pixels[j] = mask.grid[j] ? 255 : 0;
      write_png(dir / name, mask.width, mask.height, 1, pixels);
      json row = {{"file", name}, {"p", mask.p}, {"subset", subset_name(tag)}};
      manifest << row.dump() << "\n";
    }
  };
  dump(subsets.high, MaskSubsetTag::high);
  dump(subsets.low, MaskSubsetTag::low);
}

namespace {

Mask mask_from_image(const ImageU8& img, int height, int width) {
  // nearest-neighbor resize (if needed), then threshold at >= 128
  std::vector<double> raw(static_cast<size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(img.height - 1, y * img.height / height);
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(img.width - 1, x * img.width / width);
      uint8_t v;
      if (img.channels == 1) {
        v = img.pixels[static_cast<size_t>(sy) * img.width + sx];
      } else {
        const uint8_t* px =
            img.pixels.data() + (static_cast<size_t>(sy) * img.width + sx) * 3;
        v = static_cast<uint8_t>((px[0] + px[1] + px[2]) / 3);
      }
      raw[static_cast<size_t>(y) * width + x] = v / 255.0;
    }
  }
  return binarize(raw, height, width, 128.0 / 255.0);
}

}  // namespace

MaskSubsets load_mask_subsets(const std::filesystem::path& dir, int height,
                              int width) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  const fs::path manifest_path = dir / "manifest.jsonl";
  if (fs::exists(manifest_path)) {
    std::ifstream manifest(manifest_path);
    std::string line;
    while (std::getline(manifest, line)) {
      if (line.empty()) continue;
      files.push_back(dir / json::parse(line).at("file").get<std::string>());
    }
  } else {
    for (const auto& entry : fs::recursive_directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".png")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  }
  if (files.empty())
    throw std::runtime_error("load_mask_subsets: no masks found in " +
                             dir.string());
  MaskSubsets subsets;
  for (const auto& file : files) {
    Mask mask = mask_from_image(read_png(file), height, width);
    (mask.subset == MaskSubsetTag::high ? subsets.high : subsets.low)
        .push_back(std::move(mask));
  }
  return subsets;
}

}  // namespace msl
