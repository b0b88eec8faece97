#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msl/data.hpp"

namespace msl {

struct ScoredPredictions {
  int n = 0;
  int k = 0;
  std::vector<double> scores;    // [n,k] row-major, values in [0,1]
  std::vector<uint8_t> targets;  // [n,k], values in {0,1}

  ScoredPredictions select(const std::vector<int>& rows) const;
};

// Ranking AP: sort by score descending (ties by ascending original index),
// then average precision-at-rank over the positive items. Requires at
// least one positive.
double average_precision(std::span<const double> scores,
                         std::span<const uint8_t> targets);

// Mean per-class AP over classes that have at least one positive.
double mean_average_precision(const ScoredPredictions& sp);

struct PrfSuite {
  double cp = 0.0, cr = 0.0, cf1 = 0.0;
  double op = 0.0, orec = 0.0, of1 = 0.0;
};

// Threshold at `threshold` (predict positive iff score >= threshold).
// CP/CR average per-class precision/recall over classes with a nonzero
// denominator; OP/OR pool counts over all classes.
PrfSuite prf_suite(const ScoredPredictions& sp, double threshold = 0.5);

struct MetricsReport {
  int n_images = 0;
  double threshold = 0.5;
  std::vector<std::optional<double>> per_class_ap;  // nullopt: no positives
  double map = 0.0;
  PrfSuite prf;
  std::vector<std::pair<std::string, MetricsReport>> strata;
  std::vector<std::string> empty_strata;

  std::string to_json(int indent = 2) const;
};

MetricsReport compute_metrics(const ScoredPredictions& sp,
                              double threshold = 0.5);

// compute_metrics plus sub-reports on the image subsets flagged by the
// dataset metadata: small / non_small and occluded / non_occluded. Empty
// strata are listed in empty_strata instead of carrying a report.
MetricsReport stratified_report(const ScoredPredictions& sp,
                                const DatasetManifest& manifest,
                                double threshold = 0.5);

// One JSON object per line: {"id": i, "scores": [...], "targets": [...]}
void save_predictions(const ScoredPredictions& sp,
                      const std::filesystem::path& file);
ScoredPredictions load_predictions(const std::filesystem::path& file);

// columns: class,index,ap,positives
void save_per_class_csv(const MetricsReport& report,
                        const std::vector<std::string>& class_names,
                        const ScoredPredictions& sp,
                        const std::filesystem::path& file);

}  // namespace msl
