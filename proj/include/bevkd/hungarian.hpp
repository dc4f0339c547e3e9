#pragma once

#include <cstddef>
#include <vector>

namespace bevkd {

/// Minimum-cost assignment on a rows x cols cost matrix (row-major).
/// Returns, for each row, the assigned column; when rows > cols the surplus
/// rows get cols (unassigned). Ties resolve deterministically.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols);

}  // namespace bevkd
