#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msl/masking.hpp"
#include "msl/metrics.hpp"
#include "msl/model.hpp"

namespace msl {

// Fixed scoring batch size so a checkpoint scores identically whether the
// evaluation runs inside the training loop or from the CLI.
inline constexpr int kEvalBatchSize = 64;

// Batched predict over a whole split, no augmentation, optional per-image
// masking (one mask per image, sampled in record order from `seed`).
ScoredPredictions score_predictions(const ModelParams& params,
                                    const DatasetManifest& manifest,
                                    const std::vector<Tensor>& images);
ScoredPredictions score_predictions_masked(const ModelParams& params,
                                           const DatasetManifest& manifest,
                                           const std::vector<Tensor>& images,
                                           const MaskSubsets& subsets,
                                           MaskSubsetTag subset,
                                           uint64_t seed);

// Clean evaluation: full metric suite plus small/occluded strata.
MetricsReport evaluate(const ModelParams& params,
                       const DatasetManifest& manifest,
                       const std::vector<Tensor>& images);

// Same suite with every test image masked first.
MetricsReport evaluate_masked(const ModelParams& params,
                              const DatasetManifest& manifest,
                              const std::vector<Tensor>& images,
                              const MaskSubsets& subsets, MaskSubsetTag subset,
                              uint64_t seed);

struct CompareEntry {
  std::string model;
  std::string mode;  // "clean" | "masked"
  MetricsReport report;               // masked: averaged over eval seeds
  std::vector<double> per_seed_map;   // masked only
};

struct RobustnessReport {
  std::vector<CompareEntry> entries;
  std::vector<uint64_t> eval_seeds;
  std::string mask_subset;

  // rows: model,mode,metric,value (masked metrics averaged over seeds)
  std::string plot_csv() const;
  std::string to_json(int indent = 2) const;
};

struct NamedModel {
  std::string name;
  const ModelParams* params = nullptr;
};

// One entry per (model, mode). Masked reports are averaged over eval_seeds
// (per-seed mAPs retained in the JSON); deltas are derivable as
// masked - clean per metric.
RobustnessReport compare(const std::vector<NamedModel>& models,
                         const DatasetManifest& manifest,
                         const std::vector<Tensor>& images,
                         const std::vector<std::string>& modes,
                         const MaskSubsets* subsets, MaskSubsetTag subset,
                         const std::vector<uint64_t>& eval_seeds);

}  // namespace msl
