#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msl/tensor.hpp"

namespace msl {

// Compact convolutional backbone: three conv+relu blocks with stride-2
// downsampling between blocks, global average pooling, and a linear head
// producing K raw logits.
struct ArchDescriptor {
  int in_channels = 3;
  int input_h = 64;
  int input_w = 64;
  std::array<int, 3> widths{16, 32, 64};
  int kernel = 3;
  int num_classes = 8;

  bool operator==(const ArchDescriptor&) const = default;
  std::string describe() const;
};

struct ModelParams {
  ArchDescriptor arch;
  // ordered: conv1.{weight,bias}, conv2.*, conv3.*, head.{weight,bias}
  std::vector<std::pair<std::string, Tensor>> entries;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool all_finite() const;
  void zero_grad();
  uint64_t fingerprint() const;
  ModelParams copy() const;  // detached deep copy (fresh leaves)
};

// Fan-in-scaled uniform weights (U[-sqrt(6/fan_in), sqrt(6/fan_in)]), zero
// biases; bit-reproducible per (arch, seed).
ModelParams init_params(const ArchDescriptor& arch, uint64_t seed);

// batch: [N, in_channels, input_h, input_w] -> raw logits [N, K].
Tensor forward_logits(const ModelParams& params, const Tensor& batch);

// sigmoid(forward_logits); the recognition and masked branches both call
// this with the same ModelParams object.
Tensor predict(const ModelParams& params, const Tensor& batch);

// Checkpoint file: 8-byte magic, 16-digit decimal header length, JSON
// header (arch + per-tensor name/shape/offset/dtype), then the raw values
// as little-endian IEEE-754 doubles. Round-trips are bit-exact.
void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ArchDescriptor>& expected =
                                std::nullopt);

}  // namespace msl
