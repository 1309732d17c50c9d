#pragma once

// Ordinary least squares by normal equations and Gauss-Jordan elimination
// with partial pivoting. Good enough for a few dozen well-posed columns.

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace lstsq {

/// Returns the coefficients minimizing ||X b - y||².
inline std::vector<double> solve(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  const std::size_t p = x.at(0).size();
  std::vector<std::vector<double>> a(p, std::vector<double>(p + 1, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) a[i][j] += x[r][i] * x[r][j];
      a[i][p] += x[r][i] * y[r];
    }
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < p; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-9) throw std::runtime_error("lstsq: singular design");
    std::swap(a[col], a[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= p; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> b(p);
  for (std::size_t i = 0; i < p; ++i) b[i] = a[i][p] / a[i][i];
  return b;
}

/// Mean squared residual of the least-squares fit.
inline double residual_variance(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  const auto b = solve(x, y);
  double ss = 0.0;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double pred = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) pred += b[i] * x[r][i];
    ss += (y[r] - pred) * (y[r] - pred);
  }
  return ss / static_cast<double>(x.size());
}

}  // namespace lstsq
