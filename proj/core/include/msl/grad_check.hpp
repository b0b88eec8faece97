#pragma once

#include <functional>

#include "msl/tensor.hpp"

namespace msl {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Compare the analytic gradient of a scalar-valued tensor function against
// central finite differences, elementwise over x. Relative error uses a
// 1e-12 denominator floor so zero-gradient functions report 0.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn,
                           const Tensor& x, double eps = 1e-5);

}  // namespace msl
