#pragma once

#include <functional>

#include "bevkd/tensor.hpp"

namespace bevkd {

using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward()'s gradient of `f` at `x` against central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps. Per coordinate the error is
/// |analytic - numeric| / max(1e-12, |analytic| + |numeric|); the maximum is
/// returned. `x` must be a leaf; its data is restored afterwards.
GradCheckResult finite_diff_check_detailed(const ScalarFn& f, Tensor x, double eps);

inline double finite_diff_check(const ScalarFn& f, Tensor x, double eps) {
  return finite_diff_check_detailed(f, std::move(x), eps).max_relative_error;
}

}  // namespace bevkd
