#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pcbtrap/errors.hpp"

namespace pcbtrap {

/// Strictly increasing sample grid with O(1) lookup when the spacing is uniform.
class Grid {
 public:
  Grid() = default;

  explicit Grid(std::vector<double> z) : z_(std::move(z)) {
    if (z_.size() < 2) throw InvalidInput("grid needs at least two samples");
    for (std::size_t i = 1; i < z_.size(); ++i) {
      if (!(z_[i] > z_[i - 1])) throw InvalidInput("grid is not strictly increasing");
    }
    const double h = (z_.back() - z_.front()) / static_cast<double>(z_.size() - 1);
    uniform_ = true;
    for (std::size_t i = 1; i < z_.size(); ++i) {
      if (std::abs((z_[i] - z_[i - 1]) - h) > 1e-9 * h) {
        uniform_ = false;
        break;
      }
    }
    step_ = h;
  }

  static Grid uniform(double lo, double hi, std::size_t n) {
    if (n < 2 || !(hi > lo)) throw InvalidInput("invalid uniform grid bounds");
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return Grid(std::move(z));
  }

  std::size_t size() const noexcept { return z_.size(); }
  double operator[](std::size_t i) const { return z_[i]; }
  double front() const { return z_.front(); }
  double back() const { return z_.back(); }
  bool contains(double z) const { return z >= z_.front() && z <= z_.back(); }
  std::span<const double> values() const { return z_; }

  /// Index i of the interval [z_i, z_{i+1}] containing z (clamped to the grid).
  std::size_t interval(double z) const {
    const std::size_t last = z_.size() - 2;
    if (z <= z_.front()) return 0;
    if (z >= z_.back()) return last;
    if (uniform_) {
      auto i = static_cast<std::size_t>((z - z_.front()) / step_);
      i = std::min(i, last);
      // guard against rounding at interval edges
      if (z < z_[i] && i > 0) --i;
      if (z > z_[i + 1] && i < last) ++i;
      return i;
    }
    auto it = std::upper_bound(z_.begin(), z_.end(), z);
    return std::min(static_cast<std::size_t>(it - z_.begin()) - 1, last);
  }

 private:
  std::vector<double> z_;
  bool uniform_ = false;
  double step_ = 0.0;
};

/// Cubic Hermite interpolant on one interval: value and first derivative.
struct HermiteSample {
  double value;
  double slope;
};

inline HermiteSample hermite(double x0, double x1, double f0, double f1, double d0,
                             double d1, double x) {
  const double h = x1 - x0;
  const double t = (x - x0) / h;
  const double t2 = t * t;
  const double t3 = t2 * t;
  const double h00 = 2 * t3 - 3 * t2 + 1;
  const double h10 = t3 - 2 * t2 + t;
  const double h01 = -2 * t3 + 3 * t2;
  const double h11 = t3 - t2;
  const double value = h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1;
  const double dh00 = 6 * t2 - 6 * t;
  const double dh10 = 3 * t2 - 4 * t + 1;
  const double dh01 = -6 * t2 + 6 * t;
  const double dh11 = 3 * t2 - 2 * t;
  const double slope = (dh00 * f0 + dh01 * f1) / h + dh10 * d0 + dh11 * d1;
  return {value, slope};
}

/// Second-order finite-difference derivative on a non-uniform grid.
inline std::vector<double> finite_difference(const Grid& grid, std::span<const double> f) {
  const std::size_t n = grid.size();
  std::vector<double> d(n);
  if (n == 2) {
    d[0] = d[1] = (f[1] - f[0]) / (grid[1] - grid[0]);
    return d;
  }
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double h0 = grid[i] - grid[i - 1];
    const double h1 = grid[i + 1] - grid[i];
    d[i] = (-h1 / (h0 * (h0 + h1))) * f[i - 1] + ((h1 - h0) / (h0 * h1)) * f[i] +
           (h0 / (h1 * (h0 + h1))) * f[i + 1];
  }
  {
    const double h0 = grid[1] - grid[0];
    const double h1 = grid[2] - grid[1];
    d[0] = (-(2 * h0 + h1) / (h0 * (h0 + h1))) * f[0] + ((h0 + h1) / (h0 * h1)) * f[1] -
           (h0 / (h1 * (h0 + h1))) * f[2];
  }
  {
    const double h0 = grid[n - 2] - grid[n - 3];
    const double h1 = grid[n - 1] - grid[n - 2];
    d[n - 1] = (h1 / (h0 * (h0 + h1))) * f[n - 3] - ((h0 + h1) / (h0 * h1)) * f[n - 2] +
               ((2 * h1 + h0) / (h1 * (h0 + h1))) * f[n - 1];
  }
  return d;
}

}  // namespace pcbtrap
