#include "msl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "msl/image_io.hpp"

namespace msl {

namespace {

using nlohmann::json;

struct ShapeSpec {
  const char* name;
  int id;
};

constexpr int kNumShapes = 6;
const char* kShapeNames[kNumShapes] = {"circle", "square",   "triangle",
                                       "cross",  "ring",     "bar"};
const char* kColorNames[2] = {"red", "blue"};
const double kColors[2][3] = {{0.90, 0.28, 0.16}, {0.16, 0.46, 0.94}};

bool inside_shape(int shape, double dy, double dx, double size) {
  const double h = size / 2.0;
  switch (shape) {
    case 0:  // circle
      return dy * dy + dx * dx <= h * h;
    case 1:  // square
      return std::abs(dy) <= h && std::abs(dx) <= h;
    case 2: {  // upward triangle, base at the bottom
      if (dy < -h || dy > h) return false;
      const double half_width = (dy + h) / 2.0;
      return std::abs(dx) <= half_width;
    }
    case 3: {  // cross
      const double arm = std::max(1.0, size / 6.0);
      return (std::abs(dy) <= arm && std::abs(dx) <= h) ||
             (std::abs(dx) <= arm && std::abs(dy) <= h);
    }
    case 4: {  // ring
      const double r2 = dy * dy + dx * dx;
      const double inner = std::max(1.0, h - std::max(2.0, size / 6.0));
      return r2 <= h * h && r2 >= inner * inner;
    }
    case 5: {  // horizontal bar
      const double half_thick = std::max(1.0, size / 6.0);
      return std::abs(dy) <= half_thick && std::abs(dx) <= h;
    }
    default:
      return false;
  }
}

// pixel indices covered by (shape, size) centered at (cy, cx)
std::vector<int> rasterize(int shape, double cy, double cx, int size, int h,
                           int w) {
  std::vector<int> pixels;
  const double half = size / 2.0 + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - half)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + half)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - half)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + half)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (inside_shape(shape, y - cy, x - cx, size)) pixels.push_back(y * w + x);
  return pixels;
}

int overlap_count(const std::vector<int>& pixels,
                  const std::vector<int>& owner) {
  int n = 0;
  for (int p : pixels) n += owner[p] >= 0;
  return n;
}

json record_to_json(const SampleRecord& rec) {
  json objs = json::array();
  for (const auto& o : rec.objects)
    objs.push_back({{"cls", o.cls}, {"size", o.size_px}, {"occ", o.occlusion}});
  return {{"image", rec.image_file},
          {"labels", rec.labels},
          {"objects", objs}};
}

SampleRecord record_from_json(const json& row) {
  SampleRecord rec;
  rec.image_file = row.at("image").get<std::string>();
  rec.labels = row.at("labels").get<std::vector<uint8_t>>();
  for (const auto& o : row.at("objects")) {
    ObjectMeta meta;
    meta.cls = o.at("cls").get<int>();
    meta.size_px = o.at("size").get<int>();
    meta.occlusion = o.at("occ").get<double>();
    rec.objects.push_back(meta);
  }
  return rec;
}

}  // namespace

bool DatasetManifest::has_small_object(size_t i) const {
  for (const auto& o : records[i].objects)
    if (o.size_px <= kSmallObjectMaxPx) return true;
  return false;
}

bool DatasetManifest::has_occluded_object(size_t i) const {
  for (const auto& o : records[i].objects)
    if (o.occlusion > kOccludedMinFraction) return true;
  return false;
}

std::vector<std::string> class_vocabulary() {
  std::vector<std::string> names;
  for (int s = 0; s < kNumShapes; ++s)
    for (int c = 0; c < 2; ++c)
      names.push_back(std::string(kShapeNames[s]) + "_" + kColorNames[c]);
  return names;
}

DatasetManifest generate_dataset(const DatasetGenParams& params,
                                 const std::filesystem::path& dir,
                                 const std::string& split) {
  const auto vocab = class_vocabulary();
  if (params.k < 1 || params.k > static_cast<int>(vocab.size()))
    throw std::invalid_argument("generate_dataset: k must be in [1," +
                                std::to_string(vocab.size()) + "]");
  if (params.size_min < 3)
    throw std::invalid_argument("generate_dataset: size_min must be >= 3 px");
  if (params.size_max < params.size_min)
    throw std::invalid_argument("generate_dataset: size_max < size_min");
  if (params.size_max > std::min(params.height, params.width))
    throw std::invalid_argument("generate_dataset: size_max exceeds canvas");
  if (params.objects_min < 1 || params.objects_max < params.objects_min)
    throw std::invalid_argument("generate_dataset: bad objects-per-image range");
  if (params.n < 0) throw std::invalid_argument("generate_dataset: n < 0");
  if (params.overlap != "none" && params.overlap != "target")
    throw std::invalid_argument("generate_dataset: overlap must be 'none' or 'target'");

  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");

  const int h = params.height, w = params.width;
  DatasetManifest manifest;
  manifest.k = params.k;
  manifest.class_names.assign(vocab.begin(), vocab.begin() + params.k);
  manifest.split = split;
  manifest.height = h;
  manifest.width = w;
  manifest.seed = params.seed;
  manifest.root = dir;
  {
    json gp = {{"n", params.n},
               {"k", params.k},
               {"size_min", params.size_min},
               {"size_max", params.size_max},
               {"objects_min", params.objects_min},
               {"objects_max", params.objects_max},
               {"overlap", params.overlap},
               {"occluded_target", params.occluded_target},
               {"noise_sigma", params.noise_sigma}};
    manifest.gen_params_json = gp.dump();
  }

  Rng rng(mix64(params.seed, std::hash<std::string>{}(split)));
  int64_t objects_total = 0;
  int64_t objects_occluded = 0;

  for (int i = 0; i < params.n; ++i) {
    std::vector<double> canvas(static_cast<size_t>(3) * h * w);
    // background: dim base color plus per-pixel noise
    double base[3];
    for (double& b : base) b = rng.uniform(0.08, 0.30);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < h * w; ++p)
        canvas[static_cast<size_t>(c) * h * w + p] =
            std::clamp(base[c] + rng.normal(0.0, params.noise_sigma), 0.0, 1.0);

    const int n_objects = rng.uniform_int(params.objects_min, params.objects_max);
    std::vector<int> owner(static_cast<size_t>(h) * w, -1);
    std::vector<std::vector<int>> rasters;
    SampleRecord rec;
    rec.labels.assign(params.k, 0);

    for (int j = 0; j < n_objects; ++j) {
      const int cls = rng.uniform_int(0, params.k - 1);
      const int shape = cls / 2;
      const int color = cls % 2;
      const int size = rng.uniform_int(params.size_min, params.size_max);
      const double margin = size / 2.0 + 1.0;

      double cy = 0.0, cx = 0.0;
      if (params.overlap == "none" && j > 0) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
          cy = rng.uniform(margin, h - margin);
          cx = rng.uniform(margin, w - margin);
          auto pixels = rasterize(shape, cy, cx, size, h, w);
          if (overlap_count(pixels, owner) == 0) placed = true;
        }
        if (!placed) continue;  // canvas too crowded, drop the object
      } else if (params.overlap == "target" && j > 0) {
        const double fraction =
            objects_total == 0 ? 0.0
                               : static_cast<double>(objects_occluded) /
                                     static_cast<double>(objects_total);
        if (fraction < params.occluded_target && !rasters.empty()) {
          // land on an earlier object so that it ends up partially covered
          const int victim = rng.uniform_int(0, static_cast<int>(rasters.size()) - 1);
          const int vp = rasters[victim][rasters[victim].size() / 2];
          const double vy = vp / w, vx = vp % w;
          cy = std::clamp(vy + rng.uniform(-0.3, 0.5) * size, margin, h - margin);
          cx = std::clamp(vx + rng.uniform(-0.4, 0.4) * size, margin, w - margin);
        } else {
          // pick the least-overlapping of a few uniform candidates
          double best_cy = 0.0, best_cx = 0.0;
          int best_overlap = -1;
          for (int cand = 0; cand < 6; ++cand) {
            const double ty = rng.uniform(margin, h - margin);
            const double tx = rng.uniform(margin, w - margin);
            auto pixels = rasterize(shape, ty, tx, size, h, w);
            const int ov = overlap_count(pixels, owner);
            if (best_overlap < 0 || ov < best_overlap) {
              best_overlap = ov;
              best_cy = ty;
              best_cx = tx;
            }
            if (ov == 0) break;
          }
          cy = best_cy;
          cx = best_cx;
        }
      } else {
        cy = rng.uniform(margin, h - margin);
        cx = rng.uniform(margin, w - margin);
      }

      auto pixels = rasterize(shape, cy, cx, size, h, w);
      if (pixels.empty()) continue;

      const double brightness = rng.uniform(0.65, 1.05);
      double col[3];
      for (int c = 0; c < 3; ++c)
        col[c] = std::clamp(kColors[color][c] * brightness, 0.0, 1.0);
      const int index = static_cast<int>(rec.objects.size());
      for (int p : pixels) {
        owner[p] = index;
        for (int c = 0; c < 3; ++c)
          canvas[static_cast<size_t>(c) * h * w + p] = col[c];
      }
      rasters.push_back(std::move(pixels));
      rec.labels[cls] = 1;
      ObjectMeta meta;
      meta.cls = cls;
      meta.size_px = size;
      rec.objects.push_back(meta);
    }

    // exact occlusion fractions from final pixel ownership
    for (size_t j = 0; j < rasters.size(); ++j) {
      int visible = 0;
      for (int p : rasters[j]) visible += owner[p] == static_cast<int>(j);
      rec.objects[j].occlusion =
          1.0 - static_cast<double>(visible) /
                    static_cast<double>(rasters[j].size());
      ++objects_total;
      objects_occluded += rec.objects[j].occlusion > kOccludedMinFraction;
    }

    char name[64];
    std::snprintf(name, sizeof(name), "images/%s_%05d.png", split.c_str(), i);
    rec.image_file = name;
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * w * 3);
    for (int p = 0; p < h * w; ++p)
      for (int c = 0; c < 3; ++c)
        pixels[static_cast<size_t>(p) * 3 + c] = static_cast<uint8_t>(
            std::lround(canvas[static_cast<size_t>(c) * h * w + p] * 255.0));
    write_png(dir / rec.image_file, w, h, 3, pixels);
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out)
    throw std::runtime_error("save_manifest: cannot write " + file.string());
  json header = {{"k", manifest.k},
                 {"classes", manifest.class_names},
                 {"split", manifest.split},
                 {"h", manifest.height},
                 {"w", manifest.width},
                 {"seed", manifest.seed},
                 {"gen_params", json::parse(manifest.gen_params_json.empty()
                                                ? "{}"
                                                : manifest.gen_params_json)}};
  out << header.dump() << "\n";
  for (const auto& rec : manifest.records) out << record_to_json(rec).dump() << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in)
    throw std::runtime_error("load_manifest: cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("load_manifest: empty manifest " + file.string());
  const json header = json::parse(line);
  DatasetManifest manifest;
  manifest.k = header.at("k").get<int>();
  manifest.class_names = header.at("classes").get<std::vector<std::string>>();
  manifest.split = header.at("split").get<std::string>();
  manifest.height = header.at("h").get<int>();
  manifest.width = header.at("w").get<int>();
  manifest.seed = header.at("seed").get<uint64_t>();
  manifest.gen_params_json = header.at("gen_params").dump();
  manifest.root = file.parent_path();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    SampleRecord rec = record_from_json(json::parse(line));
    if (static_cast<int>(rec.labels.size()) != manifest.k)
      throw std::runtime_error("load_manifest: label vector length " +
                               std::to_string(rec.labels.size()) +
                               " does not match k=" + std::to_string(manifest.k));
    if (!std::filesystem::exists(manifest.root / rec.image_file))
      throw std::runtime_error("load_manifest: missing image " +
                               (manifest.root / rec.image_file).string());
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

std::vector<Tensor> load_images(const DatasetManifest& manifest) {
  std::vector<Tensor> images;
  images.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    const ImageU8 img = read_png(manifest.root / rec.image_file);
    if (img.channels != 3 || img.height != manifest.height ||
        img.width != manifest.width)
      throw std::runtime_error("load_images: unexpected geometry in " +
                               rec.image_file);
    std::vector<double> values(static_cast<size_t>(3) * img.height * img.width);
    const int64_t plane = static_cast<int64_t>(img.height) * img.width;
    for (int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c)
        values[c * plane + p] = img.pixels[p * 3 + c] / 255.0;
    images.push_back(
        Tensor::from_data({3, img.height, img.width}, std::move(values)));
  }
  return images;
}

Tensor labels_tensor(const DatasetManifest& manifest) {
  const int n = static_cast<int>(manifest.records.size());
  std::vector<double> values(static_cast<size_t>(n) * manifest.k);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < manifest.k; ++k)
      values[static_cast<size_t>(i) * manifest.k + k] =
          manifest.records[i].labels[k];
  return Tensor::from_data({n, manifest.k}, std::move(values));
}

Tensor stack_batch(const std::vector<Tensor>& images,
                   const std::vector<int>& indices) {
  if (indices.empty())
    throw std::invalid_argument("stack_batch: empty index list");
  const Shape& single = images[indices[0]].shape();
  Shape shape = {static_cast<int>(indices.size())};
  shape.insert(shape.end(), single.begin(), single.end());
  Tensor batch = Tensor::zeros(shape);
  auto out = batch.mutable_data();
  const int64_t stride = shape_numel(single);
  for (size_t i = 0; i < indices.size(); ++i) {
    auto src = images[indices[i]].data();
    std::copy(src.begin(), src.end(), out.begin() + i * stride);
  }
  return batch;
}

Tensor augment_apply(const Tensor& image_chw, bool flip, int crop_h,
                     int crop_w, int top, int left) {
  if (image_chw.shape().size() != 3)
    throw std::invalid_argument("augment_apply: image must be [C,H,W]");
  const int c = image_chw.shape()[0];
  const int h = image_chw.shape()[1];
  const int w = image_chw.shape()[2];
  if (crop_h < 1 || crop_h > h || crop_w < 1 || crop_w > w || top < 0 ||
      left < 0 || top + crop_h > h || left + crop_w > w)
    throw std::invalid_argument("augment_apply: crop window out of bounds");

  auto src_x = [&](int x) { return flip ? w - 1 - x : x; };
  const auto in = image_chw.data();
  const int64_t plane = static_cast<int64_t>(h) * w;

  if (crop_h == h && crop_w == w) {
    if (!flip) return image_chw.copy();
    Tensor out = Tensor::zeros(image_chw.shape());
    auto ov = out.mutable_data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          ov[ch * plane + static_cast<int64_t>(y) * w + x] =
              in[ch * plane + static_cast<int64_t>(y) * w + src_x(x)];
    return out;
  }

  // bilinear resize of the (flipped) crop window back to h x w
  Tensor out = Tensor::zeros(image_chw.shape());
  auto ov = out.mutable_data();
  const double sy = static_cast<double>(crop_h) / h;
  const double sx = static_cast<double>(crop_w) / w;
  for (int y = 0; y < h; ++y) {
    double fy = (y + 0.5) * sy - 0.5 + top;
    fy = std::clamp(fy, static_cast<double>(top),
                    static_cast<double>(top + crop_h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, top + crop_h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      double fx = (x + 0.5) * sx - 0.5 + left;
      fx = std::clamp(fx, static_cast<double>(left),
                      static_cast<double>(left + crop_w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, left + crop_w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double* p = in.data() + ch * plane;
        const double v00 = p[static_cast<int64_t>(y0) * w + src_x(x0)];
        const double v01 = p[static_cast<int64_t>(y0) * w + src_x(x1)];
        const double v10 = p[static_cast<int64_t>(y1) * w + src_x(x0)];
        const double v11 = p[static_cast<int64_t>(y1) * w + src_x(x1)];
        ov[ch * plane + static_cast<int64_t>(y) * w + x] =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) +
            wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image_chw, Rng& rng) {
  const int h = image_chw.shape()[1];
  const int w = image_chw.shape()[2];
  const bool flip = rng.bernoulli(0.5);
  const double s = rng.uniform(0.7, 1.0);
  const int crop_h = std::max(1, static_cast<int>(std::lround(s * h)));
  const int crop_w = std::max(1, static_cast<int>(std::lround(s * w)));
  const int top = rng.uniform_int(0, h - crop_h);
  const int left = rng.uniform_int(0, w - crop_w);
  return augment_apply(image_chw, flip, crop_h, crop_w, top, left);
}

std::vector<std::vector<int>> batch_indices(int n, int batch_size,
                                            uint64_t seed, int epoch) {
  if (n < 1) throw std::invalid_argument("batch_indices: empty dataset");
  if (batch_size < 1)
    throw std::invalid_argument("batch_indices: batch_size must be >= 1");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix64(seed, 0xba7c4e5ULL, static_cast<uint64_t>(epoch)));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(0, i)]);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

}  // namespace msl
