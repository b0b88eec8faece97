#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msl/data.hpp"
#include "msl/loss.hpp"
#include "msl/masking.hpp"
#include "msl/model.hpp"

namespace msl {

enum class MaskingMode { high, low, none };
enum class TrainEngine { automatic, vanilla, dual };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  int epochs = 60;
  int batch_size = 16;
  LossWeights weights;
  MaskingMode masking = MaskingMode::high;
  // automatic: vanilla loop when masking == none, dual-branch loop
  // otherwise. The explicit values exist so the degenerate dual-branch path
  // can be checked against the standalone vanilla path.
  TrainEngine engine = TrainEngine::automatic;
  uint64_t seed = 1;

  void validate() const;  // masking == none forces weights (1,0,0)
};

// Classic SGD with momentum and decoupled-from-nothing L2 weight decay:
//   g' = g + weight_decay * theta;  v = momentum * v + g';  theta -= lr * v
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const ModelParams& params);

  // Applies one update from the gradients stored on the parameters.
  // Throws without touching anything if any gradient is non-finite.
  void step(ModelParams& params, double lr, double momentum,
            double weight_decay);

 private:
  std::vector<std::vector<double>> velocity_;
};

// One recognition-only update (single forward, BCE weighted by alpha1).
LossBreakdown vanilla_step(ModelParams& params, SgdOptimizer& opt,
                           const Tensor& images, const Tensor& targets,
                           const TrainConfig& cfg);

// One dual-branch update: per-image mask sampled from the configured
// subset, both forwards share the same parameter object, gradients from
// both branches accumulate into it. With masking == none the masked branch
// is skipped entirely and the step reduces to vanilla_step bit-for-bit.
LossBreakdown msl_step(ModelParams& params, SgdOptimizer& opt,
                       const Tensor& images, const Tensor& targets,
                       const MaskSubsets* subsets, const TrainConfig& cfg,
                       Rng& mask_rng);

struct EpochLog {
  int epoch = 0;
  double rcg = 0.0, mabr = 0.0, laco = 0.0, total = 0.0;
  double test_map = 0.0;
};

struct TrainResult {
  ModelParams best;
  ModelParams final;
  int best_epoch = -1;
  double best_map = 0.0;
  std::vector<EpochLog> log;
  bool diverged = false;
  int diverged_epoch = -1;

  std::string log_csv() const;  // header + one row per epoch, %.17g fields
};

struct TrainData {
  const DatasetManifest* train_manifest = nullptr;
  const std::vector<Tensor>* train_images = nullptr;
  const DatasetManifest* test_manifest = nullptr;
  const std::vector<Tensor>* test_images = nullptr;
};

// Full loop: per-epoch shuffle/augment/mask streams derived from cfg.seed,
// test-set mAP after every epoch, best-mAP and final checkpoints. On
// divergence training stops and the last good parameters are kept.
TrainResult train(const ArchDescriptor& arch, const TrainConfig& cfg,
                  const TrainData& data, const MaskSubsets* subsets,
                  bool verbose = false);

}  // namespace msl
