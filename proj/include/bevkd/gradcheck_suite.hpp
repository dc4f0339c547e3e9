#pragma once

#include <string>
#include <vector>

namespace bevkd {

struct GradCheckCase {
  std::string name;
  double error = 0.0;      // max relative error over all coordinates
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed() const { return error <= tolerance; }
};

/// Every differentiable tensor operation on small random inputs (tolerance 1e-6).
std::vector<GradCheckCase> op_gradcheck_suite();

/// Full student forward plus the distillation objective on a 2-view, 4x4-grid,
/// depth-1 model; one case per parameter tensor (tolerance 1e-4).
std::vector<GradCheckCase> model_gradcheck_suite();

}  // namespace bevkd
