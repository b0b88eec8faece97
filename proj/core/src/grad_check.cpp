#include "msl/grad_check.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace msl {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn,
                           const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");

  Tensor probe = x.copy(/*requires_grad=*/true);
  Tensor out = fn(probe);
  if (out.numel() != 1)
    throw std::invalid_argument("grad_check: fn must return a scalar");
  if (!std::isfinite(out.value()))
    throw std::runtime_error("grad_check: fn returned a non-finite value");
  backward(out);

  std::vector<double> analytic(x.numel(), 0.0);
  auto g = probe.grad();
  for (size_t i = 0; i < g.size(); ++i) analytic[i] = g[i];

  GradCheckReport report;
  std::vector<double> base(x.data().begin(), x.data().end());
  for (int64_t i = 0; i < x.numel(); ++i) {
    std::vector<double> bumped = base;
    bumped[i] = base[i] + eps;
    const double fp = fn(Tensor::from_data(x.shape(), bumped)).value();
    bumped[i] = base[i] - eps;
    const double fm = fn(Tensor::from_data(x.shape(), bumped)).value();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: fn returned a non-finite value");
    const double fd = (fp - fm) / (2.0 * eps);
    const double abs_err = std::abs(analytic[i] - fd);
    const double denom =
        std::max(std::max(std::abs(analytic[i]), std::abs(fd)), 1e-12);
    const double rel_err = abs_err / denom;
    if (rel_err > report.max_rel_error) {
      report.max_rel_error = rel_err;
      report.worst_index = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = fd;
    }
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
  }
  return report;
}

}  // namespace msl
