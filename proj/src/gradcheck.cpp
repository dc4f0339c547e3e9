#include "bevkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevkd/errors.hpp"

namespace bevkd {

GradCheckResult finite_diff_check_detailed(const ScalarFn& f, Tensor x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  if (!x.node()->is_leaf()) throw ContractError("finite_diff_check: x must be a leaf tensor");
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();
  const Tensor loss = f(x);
  backward(loss);
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  x.clear_grad();

  GradCheckResult result;
  auto values = x.mutable_data();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = f(x).item();
    values[i] = saved - eps;
    const double minus = f(x).item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-12, std::abs(analytic[i]) + std::abs(numeric));
    if (i == 0 || err > result.max_relative_error) result = {err, i, analytic[i], numeric};
  }
  x.set_requires_grad(had_flag);
  return result;
}

}  // namespace bevkd
