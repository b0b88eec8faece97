#include "msl/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "msl/rng.hpp"

namespace msl {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'M', 'S', 'L', 'C', 'K', 'P', 'T', '1'};

struct LayerSpec {
  std::string name;
  Shape weight_shape;
  int fan_in;
};

std::vector<LayerSpec> layer_specs(const ArchDescriptor& arch) {
  std::vector<LayerSpec> specs;
  int c_in = arch.in_channels;
  for (int i = 0; i < 3; ++i) {
    const int c_out = arch.widths[i];
    specs.push_back({"conv" + std::to_string(i + 1),
                     {c_out, c_in, arch.kernel, arch.kernel},
                     c_in * arch.kernel * arch.kernel});
    c_in = c_out;
  }
  specs.push_back({"head", {arch.num_classes, c_in}, c_in});
  return specs;
}

void validate_arch(const ArchDescriptor& arch) {
  if (arch.num_classes < 1)
    throw std::invalid_argument("arch: num_classes must be >= 1");
  if (arch.in_channels < 1)
    throw std::invalid_argument("arch: in_channels must be >= 1");
  if (arch.kernel < 1 || arch.kernel % 2 == 0)
    throw std::invalid_argument("arch: kernel must be a positive odd size");
  for (int w : arch.widths)
    if (w < 1) throw std::invalid_argument("arch: widths must be >= 1");
  if (arch.input_h < 8 || arch.input_w < 8)
    throw std::invalid_argument("arch: input must be at least 8x8");
}

void write_le_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    const uint64_t bits = std::bit_cast<uint64_t>(v);
    char buf[8];
    for (int i = 0; i < 8; ++i)
      buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(buf, 8);
  }
}

void read_le_doubles(std::istream& in, std::span<double> values) {
  for (double& v : values) {
    char buf[8];
    in.read(buf, 8);
    if (!in) throw std::runtime_error("checkpoint: truncated data section");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i]))
              << (8 * i);
    v = std::bit_cast<double>(bits);
  }
}

json arch_to_json(const ArchDescriptor& arch) {
  return {{"in_channels", arch.in_channels},
          {"input_h", arch.input_h},
          {"input_w", arch.input_w},
          {"widths", arch.widths},
          {"kernel", arch.kernel},
          {"k", arch.num_classes}};
}

ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor arch;
  arch.in_channels = j.at("in_channels").get<int>();
  arch.input_h = j.at("input_h").get<int>();
  arch.input_w = j.at("input_w").get<int>();
  const auto widths = j.at("widths").get<std::vector<int>>();
  if (widths.size() != 3)
    throw std::runtime_error("checkpoint: expected 3 widths");
  std::copy(widths.begin(), widths.end(), arch.widths.begin());
  arch.kernel = j.at("kernel").get<int>();
  arch.num_classes = j.at("k").get<int>();
  return arch;
}

}  // namespace

std::string ArchDescriptor::describe() const {
  std::ostringstream os;
  os << in_channels << "x" << input_h << "x" << input_w << " -> conv["
     << widths[0] << "," << widths[1] << "," << widths[2] << "]k" << kernel
     << " -> gap -> " << num_classes;
  return os.str();
}

Tensor& ModelParams::at(const std::string& name) {
  for (auto& [n, t] : entries)
    if (n == name) return t;
  throw std::invalid_argument("ModelParams: no parameter named " + name);
}

const Tensor& ModelParams::at(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return t;
  throw std::invalid_argument("ModelParams: no parameter named " + name);
}

bool ModelParams::all_finite() const {
  for (const auto& [n, t] : entries)
    if (!t.all_finite()) return false;
  return true;
}

void ModelParams::zero_grad() {
  for (auto& [n, t] : entries) t.zero_grad();
}

uint64_t ModelParams::fingerprint() const {
  uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (const auto& [n, t] : entries) h = mix64(h, t.fingerprint());
  return h;
}

ModelParams ModelParams::copy() const {
  ModelParams out;
  out.arch = arch;
  for (const auto& [n, t] : entries)
    out.entries.emplace_back(n, t.copy(t.requires_grad()));
  return out;
}

ModelParams init_params(const ArchDescriptor& arch, uint64_t seed) {
  validate_arch(arch);
  ModelParams params;
  params.arch = arch;
  Rng rng(mix64(seed, 0x1217a7a11ULL));
  for (const auto& spec : layer_specs(arch)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
    std::vector<double> weights(shape_numel(spec.weight_shape));
    for (double& w : weights) w = rng.uniform(-bound, bound);
    params.entries.emplace_back(
        spec.name + ".weight",
        Tensor::from_data(spec.weight_shape, std::move(weights), true));
    params.entries.emplace_back(
        spec.name + ".bias",
        Tensor::zeros({spec.weight_shape[0]}, true));
  }
  return params;
}

Tensor forward_logits(const ModelParams& params, const Tensor& batch) {
  const ArchDescriptor& arch = params.arch;
  if (batch.shape().size() != 4 || batch.shape()[1] != arch.in_channels ||
      batch.shape()[2] != arch.input_h || batch.shape()[3] != arch.input_w)
    throw std::invalid_argument(
        "forward_logits: batch shape " + shape_str(batch.shape()) +
        " does not match arch " + arch.describe());
  const int pad = arch.kernel / 2;
  Tensor x = batch;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    const int stride = i == 0 ? 1 : 2;  // downsampling between blocks
    x = relu(conv2d(x, params.at(name + ".weight"), params.at(name + ".bias"),
                    stride, pad));
  }
  x = global_avg_pool(x);
  return linear(x, params.at("head.weight"), params.at("head.bias"));
}

Tensor predict(const ModelParams& params, const Tensor& batch) {
  return sigmoid(forward_logits(params, batch));
}

void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path) {
  json tensors = json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : params.entries) {
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"dtype", "f64"}});
    offset += t.numel();
  }
  const json header = {{"arch", arch_to_json(params.arch)},
                       {"tensors", tensors}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("save_checkpoint: cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  char len[17];
  std::snprintf(len, sizeof(len), "%016zu", header_text.size());
  out.write(len, 16);
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : params.entries) write_le_doubles(out, t.data());
  if (!out)
    throw std::runtime_error("save_checkpoint: write failed for " +
                             path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ArchDescriptor>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: corrupt header (bad magic) in " +
                             path.string());
  char len[17] = {};
  in.read(len, 16);
  if (!in)
    throw std::runtime_error("load_checkpoint: corrupt header (no length) in " +
                             path.string());
  size_t header_len = 0;
  for (int i = 0; i < 16; ++i) {
    if (len[i] < '0' || len[i] > '9')
      throw std::runtime_error(
          "load_checkpoint: corrupt header (bad length field) in " +
          path.string());
    header_len = header_len * 10 + (len[i] - '0');
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in)
    throw std::runtime_error("load_checkpoint: truncated header in " +
                             path.string());

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: corrupt header JSON in " +
                             path.string() + ": " + e.what());
  }

  ModelParams params;
  params.arch = arch_from_json(header.at("arch"));
  if (expected && !(params.arch == *expected)) {
    if (params.arch.num_classes != expected->num_classes)
      throw std::runtime_error(
          "load_checkpoint: class count mismatch: expected K=" +
          std::to_string(expected->num_classes) + ", found K=" +
          std::to_string(params.arch.num_classes));
    throw std::runtime_error("load_checkpoint: architecture mismatch: expected " +
                             expected->describe() + ", found " +
                             params.arch.describe());
  }

  const auto specs = layer_specs(params.arch);
  size_t spec_index = 0;
  int64_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    if (entry.at("dtype").get<std::string>() != "f64")
      throw std::runtime_error("load_checkpoint: unsupported dtype for " + name);
    if (entry.at("offset").get<int64_t>() != expected_offset)
      throw std::runtime_error("load_checkpoint: corrupt header offsets");
    // cross-check against the architecture-derived shapes
    if (spec_index / 2 >= specs.size())
      throw std::runtime_error("load_checkpoint: unexpected extra tensor " + name);
    const LayerSpec& spec = specs[spec_index / 2];
    const bool is_weight = spec_index % 2 == 0;
    const Shape want =
        is_weight ? spec.weight_shape : Shape{spec.weight_shape[0]};
    const std::string want_name = spec.name + (is_weight ? ".weight" : ".bias");
    if (name != want_name || shape != want)
      throw std::runtime_error("load_checkpoint: tensor " + name + " " +
                               shape_str(shape) + " does not match arch (" +
                               want_name + " " + shape_str(want) + ")");
    std::vector<double> values(shape_numel(shape));
    read_le_doubles(in, values);
    params.entries.emplace_back(name,
                                Tensor::from_data(shape, std::move(values), true));
    expected_offset += shape_numel(shape);
    ++spec_index;
  }
  if (spec_index != specs.size() * 2)
    throw std::runtime_error("load_checkpoint: missing tensors in " +
                             path.string());
  return params;
}

}  // namespace msl
