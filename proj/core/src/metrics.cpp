#include "msl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace msl {

namespace {

using nlohmann::json;

void validate(const ScoredPredictions& sp) {
  if (sp.n < 1 || sp.k < 1)
    throw std::invalid_argument("metrics: empty prediction matrix");
  if (sp.scores.size() != static_cast<size_t>(sp.n) * sp.k ||
      sp.targets.size() != sp.scores.size())
    throw std::invalid_argument("metrics: scores/targets size mismatch");
  for (uint8_t t : sp.targets)
    if (t != 0 && t != 1)
      throw std::invalid_argument("metrics: targets must be 0 or 1");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json report_to_json(const MetricsReport& r) {
  json per_class = json::array();
  for (const auto& ap : r.per_class_ap)
    per_class.push_back(ap ? json(*ap) : json(nullptr));
  json out = {{"n_images", r.n_images}, {"threshold", r.threshold},
              {"mAP", r.map},           {"per_class_ap", per_class},
              {"CP", r.prf.cp},         {"CR", r.prf.cr},
              {"CF1", r.prf.cf1},       {"OP", r.prf.op},
              {"OR", r.prf.orec},       {"OF1", r.prf.of1}};
  if (!r.strata.empty() || !r.empty_strata.empty()) {
    json strata = json::object();
    for (const auto& [name, sub] : r.strata)
      strata[name] = report_to_json(sub);
    out["strata"] = strata;
    out["empty_strata"] = r.empty_strata;
  }
  return out;
}

}  // namespace

ScoredPredictions ScoredPredictions::select(const std::vector<int>& rows) const {
  ScoredPredictions out;
  out.n = static_cast<int>(rows.size());
  out.k = k;
  out.scores.reserve(out.n * k);
  out.targets.reserve(out.n * k);
  for (int r : rows) {
    out.scores.insert(out.scores.end(), scores.begin() + static_cast<size_t>(r) * k,
                      scores.begin() + static_cast<size_t>(r + 1) * k);
    out.targets.insert(out.targets.end(),
                       targets.begin() + static_cast<size_t>(r) * k,
                       targets.begin() + static_cast<size_t>(r + 1) * k);
  }
  return out;
}

double average_precision(std::span<const double> scores,
                         std::span<const uint8_t> targets) {
  if (scores.size() != targets.size())
    throw std::invalid_argument("average_precision: size mismatch");
  const int n = static_cast<int>(scores.size());
  int positives = 0;
  for (uint8_t t : targets) positives += t;
  if (positives == 0)
    throw std::invalid_argument("average_precision: no positive targets");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;  // ties broken by ascending original index
  });

  double sum = 0.0;
  int hits = 0;
  for (int rank = 1; rank <= n; ++rank) {
    if (targets[order[rank - 1]]) {
      ++hits;
      sum += static_cast<double>(hits) / rank;
    }
  }
  return sum / positives;
}

double mean_average_precision(const ScoredPredictions& sp) {
  validate(sp);
  double sum = 0.0;
  int counted = 0;
  std::vector<double> col_scores(sp.n);
  std::vector<uint8_t> col_targets(sp.n);
  for (int k = 0; k < sp.k; ++k) {
    int positives = 0;
    for (int i = 0; i < sp.n; ++i) {
      col_scores[i] = sp.scores[static_cast<size_t>(i) * sp.k + k];
      col_targets[i] = sp.targets[static_cast<size_t>(i) * sp.k + k];
      positives += col_targets[i];
    }
    if (positives == 0) continue;
    sum += average_precision(col_scores, col_targets);
    ++counted;
  }
  if (counted == 0)
    throw std::invalid_argument("mean_average_precision: no class has positives");
  return sum / counted;
}

PrfSuite prf_suite(const ScoredPredictions& sp, double threshold) {
  validate(sp);
  if (threshold <= 0.0 || threshold >= 1.0)
    throw std::invalid_argument("prf_suite: threshold must be in (0,1)");
  int64_t tp_all = 0, fp_all = 0, fn_all = 0;
  double precision_sum = 0.0, recall_sum = 0.0;
  int precision_classes = 0, recall_classes = 0;
  for (int k = 0; k < sp.k; ++k) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < sp.n; ++i) {
      const bool pred = sp.scores[static_cast<size_t>(i) * sp.k + k] >= threshold;
      const bool truth = sp.targets[static_cast<size_t>(i) * sp.k + k] != 0;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    if (tp + fp > 0) {
      precision_sum += static_cast<double>(tp) / static_cast<double>(tp + fp);
      ++precision_classes;
    }
    if (tp + fn > 0) {
      recall_sum += static_cast<double>(tp) / static_cast<double>(tp + fn);
      ++recall_classes;
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  PrfSuite out;
  out.cp = precision_classes ? precision_sum / precision_classes : 0.0;
  out.cr = recall_classes ? recall_sum / recall_classes : 0.0;
  out.cf1 = out.cp + out.cr > 0.0 ? 2.0 * out.cp * out.cr / (out.cp + out.cr) : 0.0;
  out.op = tp_all + fp_all > 0
               ? static_cast<double>(tp_all) / static_cast<double>(tp_all + fp_all)
               : 0.0;
  out.orec = tp_all + fn_all > 0
                 ? static_cast<double>(tp_all) / static_cast<double>(tp_all + fn_all)
                 : 0.0;
  out.of1 =
      out.op + out.orec > 0.0 ? 2.0 * out.op * out.orec / (out.op + out.orec) : 0.0;
  return out;
}

MetricsReport compute_metrics(const ScoredPredictions& sp, double threshold) {
  validate(sp);
  MetricsReport report;
  report.n_images = sp.n;
  report.threshold = threshold;
  report.per_class_ap.resize(sp.k);
  double sum = 0.0;
  int counted = 0;
  std::vector<double> col_scores(sp.n);
  std::vector<uint8_t> col_targets(sp.n);
  for (int k = 0; k < sp.k; ++k) {
    int positives = 0;
    for (int i = 0; i < sp.n; ++i) {
      col_scores[i] = sp.scores[static_cast<size_t>(i) * sp.k + k];
      col_targets[i] = sp.targets[static_cast<size_t>(i) * sp.k + k];
      positives += col_targets[i];
    }
    if (positives == 0) continue;
    const double ap = average_precision(col_scores, col_targets);
    report.per_class_ap[k] = ap;
    sum += ap;
    ++counted;
  }
  if (counted == 0)
    throw std::invalid_argument("compute_metrics: no class has positives");
  report.map = sum / counted;
  report.prf = prf_suite(sp, threshold);
  return report;
}

MetricsReport stratified_report(const ScoredPredictions& sp,
                                const DatasetManifest& manifest,
                                double threshold) {
  if (static_cast<size_t>(sp.n) != manifest.records.size())
    throw std::invalid_argument(
        "stratified_report: prediction rows do not match manifest records");
  MetricsReport report = compute_metrics(sp, threshold);

  const std::pair<std::string, std::function<bool(size_t)>> strata[] = {
      {"small", [&](size_t i) { return manifest.has_small_object(i); }},
      {"non_small", [&](size_t i) { return !manifest.has_small_object(i); }},
      {"occluded", [&](size_t i) { return manifest.has_occluded_object(i); }},
      {"non_occluded",
       [&](size_t i) { return !manifest.has_occluded_object(i); }},
  };
  for (const auto& [name, member] : strata) {
    std::vector<int> rows;
    for (size_t i = 0; i < manifest.records.size(); ++i)
      if (member(i)) rows.push_back(static_cast<int>(i));
    if (rows.empty()) {
      report.empty_strata.push_back(name);
      continue;
    }
    try {
      report.strata.emplace_back(name,
                                 compute_metrics(sp.select(rows), threshold));
    } catch (const std::invalid_argument&) {
      // stratum exists but no class has positives in it
      report.empty_strata.push_back(name);
    }
  }
  return report;
}

std::string MetricsReport::to_json(int indent) const {
  return report_to_json(*this).dump(indent);
}

void save_predictions(const ScoredPredictions& sp,
                      const std::filesystem::path& file) {
  validate(sp);
  std::ofstream out(file);
  if (!out)
    throw std::runtime_error("save_predictions: cannot write " + file.string());
  for (int i = 0; i < sp.n; ++i) {
    json row = {{"id", i},
                {"scores",
                 std::vector<double>(sp.scores.begin() + static_cast<size_t>(i) * sp.k,
                                     sp.scores.begin() +
                                         static_cast<size_t>(i + 1) * sp.k)},
                {"targets",
                 std::vector<int>(sp.targets.begin() + static_cast<size_t>(i) * sp.k,
                                  sp.targets.begin() +
                                      static_cast<size_t>(i + 1) * sp.k)}};
    out << row.dump() << "\n";
  }
}

ScoredPredictions load_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in)
    throw std::runtime_error("load_predictions: cannot open " + file.string());
  ScoredPredictions sp;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json row = json::parse(line);
    const auto scores = row.at("scores").get<std::vector<double>>();
    const auto targets = row.at("targets").get<std::vector<int>>();
    if (sp.k == 0) sp.k = static_cast<int>(scores.size());
    if (static_cast<int>(scores.size()) != sp.k ||
        static_cast<int>(targets.size()) != sp.k)
      throw std::runtime_error("load_predictions: inconsistent row width");
    sp.scores.insert(sp.scores.end(), scores.begin(), scores.end());
    for (int t : targets) sp.targets.push_back(static_cast<uint8_t>(t));
    ++sp.n;
  }
  validate(sp);
  return sp;
}

void save_per_class_csv(const MetricsReport& report,
                        const std::vector<std::string>& class_names,
                        const ScoredPredictions& sp,
                        const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out)
    throw std::runtime_error("save_per_class_csv: cannot write " + file.string());
  out << "class,index,ap,positives\n";
  for (int k = 0; k < sp.k; ++k) {
    int positives = 0;
    for (int i = 0; i < sp.n; ++i)
      positives += sp.targets[static_cast<size_t>(i) * sp.k + k];
    const std::string name =
        k < static_cast<int>(class_names.size()) ? class_names[k]
                                                 : "class" + std::to_string(k);
    out << name << "," << k << ",";
    if (report.per_class_ap[k])
      out << format_double(*report.per_class_ap[k]);
    else
      out << "na";
    out << "," << positives << "\n";
  }
}

}  // namespace msl
