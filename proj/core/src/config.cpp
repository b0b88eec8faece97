#include "msl/config.hpp"

#include <cstdlib>
#include <fstream>

#include <json.hpp>

namespace msl {

namespace {

using nlohmann::json;

const char* kDefaultConfig = R"json({
  "dataset": {
    "n_train": 2000,
    "n_test": 500,
    "k": 8,
    "h": 64,
    "w": 64,
    "size_min": 6,
    "size_max": 28,
    "objects_min": 1,
    "objects_max": 4,
    "overlap": "target",
    "occluded_target": 0.25,
    "noise_sigma": 0.03,
    "seed": 7,
    "out": "dataset"
  },
  "masks": {
    "count_per_subset": 1000,
    "h": 64,
    "w": 64,
    "strokes_min": 2,
    "strokes_max": 7,
    "brush_min": 4.0,
    "brush_max": 12.0,
    "holes_min": 0,
    "holes_max": 4,
    "hole_radius_min": 3.0,
    "hole_radius_max": 11.0,
    "seed": 11,
    "out": "masks"
  },
  "model": {
    "in_channels": 3,
    "input_h": 64,
    "input_w": 64,
    "widths": [16, 32, 64],
    "kernel": 3,
    "k": 8
  },
  "train": {
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 0.0001,
    "epochs": 60,
    "batch_size": 16,
    "alpha1": 0.3,
    "alpha2": 0.2,
    "alpha3": 0.5,
    "masking": "high",
    "engine": "auto",
    "seed": 1,
    "dataset_dir": "dataset",
    "masks_dir": "masks",
    "out": "train"
  },
  "eval": {
    "checkpoint": "",
    "checkpoints": [],
    "dataset_dir": "dataset",
    "split": "test",
    "masks_dir": "masks",
    "mask_subset": "high",
    "seeds": [101, 102, 103],
    "modes": ["clean", "masked"],
    "out": "eval"
  }
})json";

void check_known_keys(const json& candidate, const json& reference,
                      const std::string& prefix) {
  for (const auto& [key, value] : candidate.items()) {
    if (!reference.contains(key))
      throw ConfigError("unknown config key: " + prefix + key);
    if (value.is_object() && reference.at(key).is_object())
      check_known_keys(value, reference.at(key), prefix + key + ".");
  }
}

void merge_into(json& base, const json& overlay) {
  for (const auto& [key, value] : overlay.items()) {
    if (value.is_object() && base.contains(key) && base.at(key).is_object())
      merge_into(base.at(key), value);
    else
      base[key] = value;
  }
}

json& descend(json& doc, const std::string& dotted,
              std::string* leaf_out) {
  size_t start = 0;
  json* cursor = &doc;
  while (true) {
    const size_t dot = dotted.find('.', start);
    const std::string part =
        dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ConfigError("bad config path: " + dotted);
    if (dot == std::string::npos) {
      *leaf_out = part;
      return *cursor;
    }
    if (!cursor->contains(part) || !cursor->at(part).is_object())
      throw ConfigError("unknown config section: " +
                        dotted.substr(0, dot));
    cursor = &cursor->at(part);
    start = dot + 1;
  }
}

const json lookup(const json& doc, const std::string& dotted) {
  size_t start = 0;
  const json* cursor = &doc;
  while (true) {
    const size_t dot = dotted.find('.', start);
    const std::string part =
        dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cursor->contains(part))
      throw ConfigError("unknown config key: " + dotted);
    cursor = &cursor->at(part);
    if (dot == std::string::npos) return *cursor;
    start = dot + 1;
  }
}

}  // namespace

RunConfig::RunConfig() : json_text_(json::parse(kDefaultConfig).dump()) {}

std::string RunConfig::default_json() {
  return json::parse(kDefaultConfig).dump(2);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json overlay;
  try {
    in >> overlay;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  json base = json::parse(json_text_);
  check_known_keys(overlay, json::parse(kDefaultConfig), "");
  merge_into(base, overlay);
  json_text_ = base.dump();
}

void RunConfig::apply_override(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value, got " +
                      assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  const json reference = json::parse(kDefaultConfig);
  try {
    lookup(reference, path);
  } catch (const ConfigError&) {
    throw ConfigError("unknown config key: " + path);
  }

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // plain string
  }

  json doc = json::parse(json_text_);
  std::string leaf;
  json& parent = descend(doc, path, &leaf);
  parent[leaf] = value;
  json_text_ = doc.dump();
}

std::string RunConfig::resolved(int indent) const {
  return json::parse(json_text_).dump(indent);
}

DatasetGenParams RunConfig::dataset_params() const {
  const json doc = json::parse(json_text_).at("dataset");
  DatasetGenParams p;
  p.k = doc.at("k").get<int>();
  p.height = doc.at("h").get<int>();
  p.width = doc.at("w").get<int>();
  p.size_min = doc.at("size_min").get<int>();
  p.size_max = doc.at("size_max").get<int>();
  p.objects_min = doc.at("objects_min").get<int>();
  p.objects_max = doc.at("objects_max").get<int>();
  p.overlap = doc.at("overlap").get<std::string>();
  p.occluded_target = doc.at("occluded_target").get<double>();
  p.noise_sigma = doc.at("noise_sigma").get<double>();
  p.seed = doc.at("seed").get<uint64_t>();
  return p;
}

int RunConfig::dataset_n_train() const {
  return json::parse(json_text_).at("dataset").at("n_train").get<int>();
}
int RunConfig::dataset_n_test() const {
  return json::parse(json_text_).at("dataset").at("n_test").get<int>();
}

MaskGenParams RunConfig::mask_gen_params() const {
  const json doc = json::parse(json_text_).at("masks");
  MaskGenParams p;
  p.strokes_min = doc.at("strokes_min").get<int>();
  p.strokes_max = doc.at("strokes_max").get<int>();
  p.brush_min = doc.at("brush_min").get<double>();
  p.brush_max = doc.at("brush_max").get<double>();
  p.holes_min = doc.at("holes_min").get<int>();
  p.holes_max = doc.at("holes_max").get<int>();
  p.hole_radius_min = doc.at("hole_radius_min").get<double>();
  p.hole_radius_max = doc.at("hole_radius_max").get<double>();
  return p;
}

int RunConfig::masks_count_per_subset() const {
  return json::parse(json_text_).at("masks").at("count_per_subset").get<int>();
}
int RunConfig::masks_height() const {
  return json::parse(json_text_).at("masks").at("h").get<int>();
}
int RunConfig::masks_width() const {
  return json::parse(json_text_).at("masks").at("w").get<int>();
}
uint64_t RunConfig::masks_seed() const {
  return json::parse(json_text_).at("masks").at("seed").get<uint64_t>();
}

ArchDescriptor RunConfig::arch() const {
  const json doc = json::parse(json_text_).at("model");
  ArchDescriptor arch;
  arch.in_channels = doc.at("in_channels").get<int>();
  arch.input_h = doc.at("input_h").get<int>();
  arch.input_w = doc.at("input_w").get<int>();
  const auto widths = doc.at("widths").get<std::vector<int>>();
  if (widths.size() != 3)
    throw ConfigError("model.widths must have exactly 3 entries");
  std::copy(widths.begin(), widths.end(), arch.widths.begin());
  arch.kernel = doc.at("kernel").get<int>();
  arch.num_classes = doc.at("k").get<int>();
  return arch;
}

TrainConfig RunConfig::train_config() const {
  const json doc = json::parse(json_text_).at("train");
  TrainConfig cfg;
  cfg.lr = doc.at("lr").get<double>();
  cfg.momentum = doc.at("momentum").get<double>();
  cfg.weight_decay = doc.at("weight_decay").get<double>();
  cfg.epochs = doc.at("epochs").get<int>();
  cfg.batch_size = doc.at("batch_size").get<int>();
  cfg.weights.alpha1 = doc.at("alpha1").get<double>();
  cfg.weights.alpha2 = doc.at("alpha2").get<double>();
  cfg.weights.alpha3 = doc.at("alpha3").get<double>();
  const std::string masking = doc.at("masking").get<std::string>();
  if (masking == "high")
    cfg.masking = MaskingMode::high;
  else if (masking == "low")
    cfg.masking = MaskingMode::low;
  else if (masking == "none")
    cfg.masking = MaskingMode::none;
  else
    throw ConfigError("train.masking must be high|low|none, got " + masking);
  const std::string engine = doc.at("engine").get<std::string>();
  if (engine == "auto")
    cfg.engine = TrainEngine::automatic;
  else if (engine == "vanilla")
    cfg.engine = TrainEngine::vanilla;
  else if (engine == "dual")
    cfg.engine = TrainEngine::dual;
  else
    throw ConfigError("train.engine must be auto|vanilla|dual, got " + engine);
  cfg.seed = doc.at("seed").get<uint64_t>();
  return cfg;
}

std::vector<uint64_t> RunConfig::eval_seeds() const {
  return json::parse(json_text_)
      .at("eval")
      .at("seeds")
      .get<std::vector<uint64_t>>();
}

std::string RunConfig::eval_mask_subset() const {
  const std::string s =
      json::parse(json_text_).at("eval").at("mask_subset").get<std::string>();
  if (s != "high" && s != "low")
    throw ConfigError("eval.mask_subset must be high|low, got " + s);
  return s;
}

std::string RunConfig::get_string(const std::string& dotted) const {
  return lookup(json::parse(json_text_), dotted).get<std::string>();
}
double RunConfig::get_double(const std::string& dotted) const {
  return lookup(json::parse(json_text_), dotted).get<double>();
}
int RunConfig::get_int(const std::string& dotted) const {
  return lookup(json::parse(json_text_), dotted).get<int>();
}

std::filesystem::path resolve_run_dir(const std::string& out) {
  std::filesystem::path path(out);
  if (path.is_absolute()) return path;
  const char* root = std::getenv("MSL_RUN_ROOT");
  return std::filesystem::path(root ? root : "runs") / path;
}

void prepare_run_dir(const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw ConfigError("output directory " + dir.string() +
                        " already exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

}  // namespace msl
