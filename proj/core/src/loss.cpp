#include "msl/loss.hpp"

#include <stdexcept>

namespace msl {

Tensor bce(const Tensor& pred, const Tensor& target) {
  return bce_loss(pred, target);
}

Tensor laco(const Tensor& y_p, const Tensor& y_mp) {
  return consistency_loss(y_p, y_mp);
}

TotalLoss total_loss(const Tensor& y_p, const Tensor& y_mp, const Tensor& y_gt,
                     const LossWeights& weights) {
  if (weights.alpha1 < 0.0 || weights.alpha2 < 0.0 || weights.alpha3 < 0.0)
    throw std::invalid_argument("total_loss: weights must be nonnegative");
  if (y_p.shape() != y_mp.shape() || y_p.shape() != y_gt.shape())
    throw std::invalid_argument("total_loss: shape mismatch between " +
                                shape_str(y_p.shape()) + ", " +
                                shape_str(y_mp.shape()) + ", " +
                                shape_str(y_gt.shape()));

  const Tensor rcg_term = bce(y_p, y_gt);
  const Tensor mabr_term = bce(y_mp, y_gt);
  const Tensor laco_term = laco(y_p, y_mp);

  // zero-weight terms stay out of the graph so the reductions are exact
  Tensor total;
  auto append = [&total](const Tensor& term, double alpha) {
    if (alpha == 0.0) return;
    const Tensor weighted = scale(term, alpha);
    total = total.defined() ? add(total, weighted) : weighted;
  };
  append(rcg_term, weights.alpha1);
  append(mabr_term, weights.alpha2);
  append(laco_term, weights.alpha3);
  if (!total.defined()) total = Tensor::zeros({1});

  TotalLoss result;
  result.total = total;
  result.values = {rcg_term.value(), mabr_term.value(), laco_term.value(),
                   total.value()};
  return result;
}

}  // namespace msl
