#pragma once

#include "msl/tensor.hpp"

namespace msl {

// Trade-off weights of the combined objective. Defaults are the best grid
// row: (0.3, 0.2, 0.5).
struct LossWeights {
  double alpha1 = 0.3;  // recognition branch BCE
  double alpha2 = 0.2;  // masked branch BCE
  double alpha3 = 0.5;  // label-consistency term

  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double rcg = 0.0;
  double mabr = 0.0;
  double laco = 0.0;
  double total = 0.0;
};

// The full objective as a graph tensor plus the plain component values.
struct TotalLoss {
  Tensor total;
  LossBreakdown values;
};

// Mean BCE over all entries (see bce_loss).
Tensor bce(const Tensor& pred, const Tensor& target);

// Batch-mean squared L2 distance between the two prediction vectors.
Tensor laco(const Tensor& y_p, const Tensor& y_mp);

// total = alpha1*bce(y_p,y_gt) + alpha2*bce(y_mp,y_gt) + alpha3*laco(y_p,y_mp)
// Terms with zero weight are not added to the graph, so (1,0,0) is exactly
// the plain recognition loss and (1,1,0) is exactly the two-branch sum.
TotalLoss total_loss(const Tensor& y_p, const Tensor& y_mp, const Tensor& y_gt,
                     const LossWeights& weights);

}  // namespace msl
