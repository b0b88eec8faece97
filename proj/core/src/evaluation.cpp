#include "msl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace msl {

namespace {

using nlohmann::json;

const char* kPlotMetrics[] = {"mAP", "CP", "CR", "CF1", "OP", "OR", "OF1"};

double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "mAP") return r.map;
  if (name == "CP") return r.prf.cp;
  if (name == "CR") return r.prf.cr;
  if (name == "CF1") return r.prf.cf1;
  if (name == "OP") return r.prf.op;
  if (name == "OR") return r.prf.orec;
  if (name == "OF1") return r.prf.of1;
  throw std::invalid_argument("unknown metric " + name);
}

ScoredPredictions score_batched(const ModelParams& params,
                                const DatasetManifest& manifest,
                                const std::vector<Tensor>& batch_images) {
  const int n = static_cast<int>(batch_images.size());
  ScoredPredictions sp;
  sp.n = n;
  sp.k = manifest.k;
  sp.scores.resize(static_cast<size_t>(n) * manifest.k);
  for (const auto& rec : manifest.records)
    sp.targets.insert(sp.targets.end(), rec.labels.begin(), rec.labels.end());

  for (int start = 0; start < n; start += kEvalBatchSize) {
    const int end = std::min(n, start + kEvalBatchSize);
    Shape shape = {end - start};
    const Shape& single = batch_images[start].shape();
    shape.insert(shape.end(), single.begin(), single.end());
    Tensor batch = Tensor::zeros(shape);
    auto out = batch.mutable_data();
    const int64_t stride = shape_numel(single);
    for (int i = start; i < end; ++i) {
      auto src = batch_images[i].data();
      std::copy(src.begin(), src.end(), out.begin() + (i - start) * stride);
    }
    const Tensor scores = predict(params, batch);
    auto sv = scores.data();
    std::copy(sv.begin(), sv.end(),
              sp.scores.begin() + static_cast<size_t>(start) * manifest.k);
  }
  return sp;
}

// elementwise mean of reports (used to average masked runs over seeds)
MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport out = reports.front();
  const double inv = 1.0 / static_cast<double>(reports.size());
  auto avg = [&](auto get) {
    double s = 0.0;
    for (const auto& r : reports) s += get(r);
    return s * inv;
  };
  out.map = avg([](const MetricsReport& r) { return r.map; });
  out.prf.cp = avg([](const MetricsReport& r) { return r.prf.cp; });
  out.prf.cr = avg([](const MetricsReport& r) { return r.prf.cr; });
  out.prf.cf1 = avg([](const MetricsReport& r) { return r.prf.cf1; });
  out.prf.op = avg([](const MetricsReport& r) { return r.prf.op; });
  out.prf.orec = avg([](const MetricsReport& r) { return r.prf.orec; });
  out.prf.of1 = avg([](const MetricsReport& r) { return r.prf.of1; });
  for (size_t k = 0; k < out.per_class_ap.size(); ++k) {
    bool all = true;
    double s = 0.0;
    for (const auto& r : reports) {
      if (!r.per_class_ap[k]) {
        all = false;
        break;
      }
      s += *r.per_class_ap[k];
    }
    out.per_class_ap[k] = all ? std::optional<double>(s * inv) : std::nullopt;
  }
  out.strata.clear();  // strata are reported per seed only for clean runs
  out.empty_strata.clear();
  return out;
}

}  // namespace

ScoredPredictions score_predictions(const ModelParams& params,
                                    const DatasetManifest& manifest,
                                    const std::vector<Tensor>& images) {
  if (images.size() != manifest.records.size())
    throw std::invalid_argument("score_predictions: image count mismatch");
  return score_batched(params, manifest, images);
}

ScoredPredictions score_predictions_masked(const ModelParams& params,
                                           const DatasetManifest& manifest,
                                           const std::vector<Tensor>& images,
                                           const MaskSubsets& subsets,
                                           MaskSubsetTag subset,
                                           uint64_t seed) {
  if (images.size() != manifest.records.size())
    throw std::invalid_argument("score_predictions_masked: image count mismatch");
  Rng rng(mix64(seed, 0xe7a1ULL));
  std::vector<Tensor> masked;
  masked.reserve(images.size());
  for (const auto& image : images)
    masked.push_back(apply_mask(image, sample_mask(subsets, subset, rng)));
  return score_batched(params, manifest, masked);
}

MetricsReport evaluate(const ModelParams& params,
                       const DatasetManifest& manifest,
                       const std::vector<Tensor>& images) {
  if (params.arch.num_classes != manifest.k)
    throw std::invalid_argument(
        "evaluate: checkpoint has K=" +
        std::to_string(params.arch.num_classes) + " but dataset has K=" +
        std::to_string(manifest.k));
  return stratified_report(score_predictions(params, manifest, images),
                           manifest);
}

MetricsReport evaluate_masked(const ModelParams& params,
                              const DatasetManifest& manifest,
                              const std::vector<Tensor>& images,
                              const MaskSubsets& subsets, MaskSubsetTag subset,
                              uint64_t seed) {
  if (params.arch.num_classes != manifest.k)
    throw std::invalid_argument(
        "evaluate_masked: checkpoint has K=" +
        std::to_string(params.arch.num_classes) + " but dataset has K=" +
        std::to_string(manifest.k));
  return stratified_report(
      score_predictions_masked(params, manifest, images, subsets, subset, seed),
      manifest);
}

RobustnessReport compare(const std::vector<NamedModel>& models,
                         const DatasetManifest& manifest,
                         const std::vector<Tensor>& images,
                         const std::vector<std::string>& modes,
                         const MaskSubsets* subsets, MaskSubsetTag subset,
                         const std::vector<uint64_t>& eval_seeds) {
  if (models.empty())
    throw std::invalid_argument("compare: at least one model required");
  RobustnessReport report;
  report.eval_seeds = eval_seeds;
  report.mask_subset = subset == MaskSubsetTag::high ? "high" : "low";
  for (const auto& model : models) {
    for (const auto& mode : modes) {
      CompareEntry entry;
      entry.model = model.name;
      entry.mode = mode;
      if (mode == "clean") {
        entry.report = evaluate(*model.params, manifest, images);
      } else if (mode == "masked") {
        if (subsets == nullptr)
          throw std::invalid_argument("compare: masked mode needs subsets");
        if (eval_seeds.empty())
          throw std::invalid_argument("compare: masked mode needs eval seeds");
        std::vector<MetricsReport> runs;
        for (uint64_t seed : eval_seeds) {
          runs.push_back(evaluate_masked(*model.params, manifest, images,
                                         *subsets, subset, seed));
          entry.per_seed_map.push_back(runs.back().map);
        }
        entry.report = average_reports(runs);
      } else {
        throw std::invalid_argument("compare: unknown mode " + mode);
      }
      report.entries.push_back(std::move(entry));
    }
  }
  return report;
}

std::string RobustnessReport::plot_csv() const {
  std::ostringstream os;
  os << "model,mode,metric,value\n";
  char buf[32];
  for (const auto& entry : entries) {
    for (const char* metric : kPlotMetrics) {
      std::snprintf(buf, sizeof(buf), "%.17g",
                    metric_value(entry.report, metric));
      os << entry.model << "," << entry.mode << "," << metric << "," << buf
         << "\n";
    }
  }
  return os.str();
}

std::string RobustnessReport::to_json(int indent) const {
  json out;
  out["eval_seeds"] = eval_seeds;
  out["mask_subset"] = mask_subset;
  json entries_json = json::array();
  for (const auto& entry : entries) {
    json e = {{"model", entry.model},
              {"mode", entry.mode},
              {"report", json::parse(entry.report.to_json())}};
    if (!entry.per_seed_map.empty()) e["per_seed_map"] = entry.per_seed_map;
    entries_json.push_back(std::move(e));
  }
  out["entries"] = entries_json;

  // masked - clean deltas per model, when both modes are present
  json deltas = json::object();
  for (const auto& entry : entries) {
    if (entry.mode != "masked") continue;
    for (const auto& other : entries) {
      if (other.model != entry.model || other.mode != "clean") continue;
      json d = json::object();
      for (const char* metric : kPlotMetrics)
        d[metric] = metric_value(entry.report, metric) -
                    metric_value(other.report, metric);
      deltas[entry.model] = std::move(d);
    }
  }
  if (!deltas.empty()) out["deltas"] = deltas;
  return out.dump(indent);
}

}  // namespace msl
