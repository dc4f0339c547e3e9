#include "bevkd/hungarian.hpp"

#include <cmath>
#include <limits>

#include "bevkd/errors.hpp"

namespace bevkd {
namespace {

// Potentials-based Kuhn-Munkres, requires n <= m. a is 1-indexed [n+1][m+1].
std::vector<std::size_t> solve(const std::vector<double>& a, std::size_t n, std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 * (m + 1) + j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, m);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols) throw DimensionError("hungarian: cost matrix size does not match rows x cols");
  for (double c : cost)
    if (!std::isfinite(c)) throw ContractError("hungarian: cost matrix contains a non-finite entry");
  if (rows == 0) return {};
  if (cols == 0) return std::vector<std::size_t>(rows, 0);
  if (rows <= cols) {
    std::vector<double> a((rows + 1) * (cols + 1), 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) a[(i + 1) * (cols + 1) + j + 1] = cost[i * cols + j];
    return solve(a, rows, cols);
  }
  std::vector<double> a((cols + 1) * (rows + 1), 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) a[(j + 1) * (rows + 1) + i + 1] = cost[i * cols + j];
  const auto col_to_row = solve(a, cols, rows);
  std::vector<std::size_t> row_to_col(rows, cols);
  for (std::size_t j = 0; j < cols; ++j) row_to_col[col_to_row[j]] = j;
  return row_to_col;
}

}  // namespace bevkd
