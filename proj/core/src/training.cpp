#include "msl/training.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "msl/evaluation.hpp"

namespace msl {

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// stack per-image tensors [C,H,W] into a [B,C,H,W] batch
Tensor assemble_batch(const std::vector<Tensor>& images) {
  const Shape& single = images.front().shape();
  Shape shape = {static_cast<int>(images.size())};
  shape.insert(shape.end(), single.begin(), single.end());
  Tensor batch = Tensor::zeros(shape);
  auto out = batch.mutable_data();
  const int64_t stride = shape_numel(single);
  for (size_t i = 0; i < images.size(); ++i) {
    auto src = images[i].data();
    std::copy(src.begin(), src.end(), out.begin() + i * stride);
  }
  return batch;
}

Tensor select_rows(const Tensor& matrix, const std::vector<int>& rows) {
  const int k = matrix.shape()[1];
  std::vector<double> values(rows.size() * k);
  auto src = matrix.data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(src.begin() + static_cast<int64_t>(rows[i]) * k,
              src.begin() + static_cast<int64_t>(rows[i] + 1) * k,
              values.begin() + i * k);
  return Tensor::from_data({static_cast<int>(rows.size()), k},
                           std::move(values));
}

void check_loss_finite(double total) {
  if (!std::isfinite(total))
    throw std::runtime_error("training diverged: non-finite total loss");
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("train: lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("train: momentum must be in [0,1)");
  if (weight_decay < 0.0)
    throw std::invalid_argument("train: weight_decay must be >= 0");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1");
  if (weights.alpha1 < 0.0 || weights.alpha2 < 0.0 || weights.alpha3 < 0.0)
    throw std::invalid_argument("train: loss weights must be nonnegative");
  if (masking == MaskingMode::none &&
      !(weights.alpha1 == 1.0 && weights.alpha2 == 0.0 &&
        weights.alpha3 == 0.0))
    throw std::invalid_argument(
        "train: masking=none is the vanilla setting and forces weights "
        "(1,0,0)");
  if (engine == TrainEngine::vanilla && masking != MaskingMode::none)
    throw std::invalid_argument(
        "train: the vanilla engine requires masking=none");
}

SgdOptimizer::SgdOptimizer(const ModelParams& params) {
  for (const auto& [name, t] : params.entries)
    velocity_.emplace_back(t.numel(), 0.0);
}

void SgdOptimizer::step(ModelParams& params, double lr, double momentum,
                        double weight_decay) {
  if (velocity_.size() != params.entries.size())
    throw std::invalid_argument("SgdOptimizer: parameter count changed");
  // validate every gradient before touching any parameter
  for (const auto& [name, t] : params.entries) {
    auto g = t.grad();
    for (double v : g)
      if (!std::isfinite(v))
        throw std::runtime_error("sgd_step: non-finite gradient in " + name +
                                 "; step aborted, parameters unchanged");
  }
  for (size_t i = 0; i < params.entries.size(); ++i) {
    Tensor& t = params.entries[i].second;
    auto g = t.grad();
    auto theta = t.mutable_data();
    auto& v = velocity_[i];
    for (size_t j = 0; j < v.size(); ++j) {
      const double grad = j < g.size() ? g[j] : 0.0;
      const double adjusted = grad + weight_decay * theta[j];
      v[j] = momentum * v[j] + adjusted;
      theta[j] -= lr * v[j];
    }
  }
}

LossBreakdown vanilla_step(ModelParams& params, SgdOptimizer& opt,
                           const Tensor& images, const Tensor& targets,
                           const TrainConfig& cfg) {
  const Tensor y_p = predict(params, images);
  const Tensor rcg = bce(y_p, targets);
  const Tensor total = scale(rcg, cfg.weights.alpha1);
  check_loss_finite(total.value());
  backward(total);
  opt.step(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  params.zero_grad();
  return {rcg.value(), 0.0, 0.0, total.value()};
}

LossBreakdown msl_step(ModelParams& params, SgdOptimizer& opt,
                       const Tensor& images, const Tensor& targets,
                       const MaskSubsets* subsets, const TrainConfig& cfg,
                       Rng& mask_rng) {
  if (images.shape()[0] < 1)
    throw std::invalid_argument("msl_step: empty batch");

  if (cfg.masking == MaskingMode::none) {
    // degenerate single-branch form; kept inline (not delegated) so the
    // vanilla reduction stays a meaningful cross-check
    const Tensor y_p = predict(params, images);
    const Tensor rcg = bce(y_p, targets);
    const Tensor total = scale(rcg, cfg.weights.alpha1);
    check_loss_finite(total.value());
    backward(total);
    opt.step(params, cfg.lr, cfg.momentum, cfg.weight_decay);
    params.zero_grad();
    return {rcg.value(), 0.0, 0.0, total.value()};
  }

  if (subsets == nullptr)
    throw std::invalid_argument("msl_step: mask subsets required");
  const MaskSubsetTag tag = cfg.masking == MaskingMode::high
                                ? MaskSubsetTag::high
                                : MaskSubsetTag::low;
  const int batch = images.shape()[0];
  const int h = images.shape()[2];
  const int w = images.shape()[3];
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int channels = images.shape()[1];

  // one fresh mask per image, applied across all channels
  Tensor masked = images.copy();
  auto mv = masked.mutable_data();
  for (int i = 0; i < batch; ++i) {
    const Mask& mask = sample_mask(*subsets, tag, mask_rng);
    for (int c = 0; c < channels; ++c) {
      double* p = mv.data() + (static_cast<int64_t>(i) * channels + c) * plane;
      for (int64_t j = 0; j < plane; ++j) p[j] *= mask.grid[j];
    }
  }

  const uint64_t theta_before = params.fingerprint();
  const Tensor y_p = predict(params, images);
  if (params.fingerprint() != theta_before)
    throw std::logic_error("msl_step: forward pass mutated parameters");
  const Tensor y_mp = predict(params, masked);  // same theta, shared weights
  const TotalLoss loss = total_loss(y_p, y_mp, targets, cfg.weights);
  check_loss_finite(loss.values.total);
  backward(loss.total);
  opt.step(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  params.zero_grad();
  return loss.values;
}

std::string TrainResult::log_csv() const {
  std::ostringstream os;
  os << "epoch,rcg,mabr,laco,total,test_map\n";
  for (const auto& row : log)
    os << row.epoch << "," << fmt17(row.rcg) << "," << fmt17(row.mabr) << ","
       << fmt17(row.laco) << "," << fmt17(row.total) << ","
       << fmt17(row.test_map) << "\n";
  return os.str();
}

TrainResult train(const ArchDescriptor& arch, const TrainConfig& cfg,
                  const TrainData& data, const MaskSubsets* subsets,
                  bool verbose) {
  cfg.validate();
  if (!data.train_manifest || !data.train_images || !data.test_manifest ||
      !data.test_images)
    throw std::invalid_argument("train: manifests and images are required");
  if (data.train_manifest->records.empty())
    throw std::invalid_argument("train: empty training manifest");
  if (cfg.masking != MaskingMode::none &&
      (subsets == nullptr ||
       (cfg.masking == MaskingMode::high ? subsets->high : subsets->low)
           .empty()))
    throw std::invalid_argument("train: masking requested but subset is empty");

  const bool use_vanilla =
      cfg.engine == TrainEngine::vanilla ||
      (cfg.engine == TrainEngine::automatic && cfg.masking == MaskingMode::none);

  TrainResult result;
  ModelParams params = init_params(arch, cfg.seed);
  SgdOptimizer opt(params);
  const Tensor train_labels = labels_tensor(*data.train_manifest);
  const int n = static_cast<int>(data.train_manifest->records.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng aug_rng(mix64(cfg.seed, 0xa06e47ULL, static_cast<uint64_t>(epoch)));
    Rng mask_rng(mix64(cfg.seed, 0x3a5c1dULL, static_cast<uint64_t>(epoch)));
    double sum_rcg = 0, sum_mabr = 0, sum_laco = 0, sum_total = 0;

    try {
      for (const auto& batch : batch_indices(n, cfg.batch_size, cfg.seed, epoch)) {
        std::vector<Tensor> views;
        views.reserve(batch.size());
        for (int idx : batch)
          views.push_back(augment((*data.train_images)[idx], aug_rng));
        const Tensor images = assemble_batch(views);
        const Tensor targets = select_rows(train_labels, batch);

        LossBreakdown step =
            use_vanilla
                ? vanilla_step(params, opt, images, targets, cfg)
                : msl_step(params, opt, images, targets, subsets, cfg, mask_rng);
        const double weight = static_cast<double>(batch.size());
        sum_rcg += step.rcg * weight;
        sum_mabr += step.mabr * weight;
        sum_laco += step.laco * weight;
        sum_total += step.total * weight;
      }
    } catch (const std::runtime_error& e) {
      result.diverged = true;
      result.diverged_epoch = epoch + 1;
      if (verbose)
        std::fprintf(stderr, "epoch %d: %s\n", epoch + 1, e.what());
      break;
    }

    const ScoredPredictions sp =
        score_predictions(params, *data.test_manifest, *data.test_images);
    EpochLog row;
    row.epoch = epoch + 1;
    row.rcg = sum_rcg / n;
    row.mabr = sum_mabr / n;
    row.laco = sum_laco / n;
    row.total = sum_total / n;
    row.test_map = mean_average_precision(sp);
    result.log.push_back(row);

    if (result.best_epoch < 0 || row.test_map > result.best_map) {
      result.best = params.copy();
      result.best_map = row.test_map;
      result.best_epoch = row.epoch;
    }
    if (verbose)
      std::fprintf(stderr,
                   "epoch %d/%d total=%.5f rcg=%.5f mabr=%.5f laco=%.5f "
                   "test_mAP=%.4f\n",
                   row.epoch, cfg.epochs, row.total, row.rcg, row.mabr,
                   row.laco, row.test_map);
  }

  result.final = params.copy();
  if (result.best_epoch < 0) result.best = params.copy();
  return result;
}

}  // namespace msl
