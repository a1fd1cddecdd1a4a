#pragma once

// Photon-arrival / RF-phase correlation analysis for micromotion
// compensation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/errors.hpp"

namespace pcbtrap {

/// Number of RF cycles spanned by one histogram: one when the counter is
/// stopped at the drive frequency, two when stopped at half of it.
enum class FoldMode { full_period = 1, double_period = 2 };

inline constexpr std::size_t kMinPhaseBins = 8;

struct PhaseHistogram {
  std::vector<double> counts;
  FoldMode fold = FoldMode::full_period;

  std::size_t bins() const { return counts.size(); }

  double total() const {
    double s = 0.0;
    for (double c : counts) s += c;
    return s;
  }

  /// RF phase at the centre of bin j.
  double phase(std::size_t j) const {
    const double cycles = static_cast<double>(fold);
    return cycles * kTwoPi * (static_cast<double>(j) + 0.5) / static_cast<double>(bins());
  }

  /// Factor by which averaging over one bin reduces a unit sinusoid.
  double bin_average_factor() const {
    const double x = static_cast<double>(fold) * kPi / static_cast<double>(bins());
    return std::sin(x) / x;
  }

  void validate() const {
    if (counts.size() < kMinPhaseBins) throw InvalidInput("phase histogram needs at least 8 bins");
    for (double c : counts) {
      if (!(c >= 0)) throw InvalidInput("phase histogram counts must be non-negative");
    }
  }
};

struct SineFit {
  double amplitude = 0.0;  // counts per bin, signed against the reference phase
  double phase = 0.0;      // rad
  double offset = 0.0;     // counts per bin
  double amplitude_sigma = 0.0;
  double max_residual = 0.0;  // relative to the offset
};

struct ScanPoint {
  double voltage = 0.0;
  SineFit fit;
};

struct CompensationScan {
  std::vector<ScanPoint> points;

  void validate() const {
    if (points.size() < 2) throw InvalidInput("compensation scan needs at least two points");
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (points[i].voltage != points[0].voltage) return;
    }
    throw InvalidInput("compensation scan needs at least two distinct voltages");
  }
};

/// Poisson counts with bin means proportional to 1 + depth sin(theta + theta0),
/// integrated over each bin.
inline PhaseHistogram simulate_histogram(double modulation_depth, double mean_rate,
                                         double duration, std::size_t bins, std::mt19937_64& rng,
                                         double phase_offset = 0.0,
                                         FoldMode fold = FoldMode::full_period) {
  if (!(std::abs(modulation_depth) <= 1)) throw InvalidInput("modulation depth must lie in [-1, 1]");
  if (!(duration > 0)) throw InvalidInput("collection time must be positive");
  if (!(mean_rate >= 0)) throw InvalidInput("count rate must be non-negative");
  PhaseHistogram h;
  h.fold = fold;
  h.counts.assign(bins, 0.0);
  h.validate();
  const double per_bin = mean_rate * duration / static_cast<double>(bins);
  const double g = h.bin_average_factor();
  for (std::size_t j = 0; j < bins; ++j) {
    const double mean = per_bin * (1.0 + modulation_depth * g * std::sin(h.phase(j) + phase_offset));
    std::poisson_distribution<long long> d(std::max(mean, 0.0));
    h.counts[j] = static_cast<double>(d(rng));
  }
  return h;
}

/// Poisson-weighted fit of offset + A sin(theta + theta0). The returned
/// amplitude is A cos(theta0 - reference_phase), the component along the reference.
inline SineFit fit_sine(const PhaseHistogram& h, double reference_phase = 0.0) {
  h.validate();
  const std::size_t n = h.bins();
  const double total = h.total();
  if (!(total > 0)) throw EstimationError("histogram has no counts");
  std::size_t occupied = 0;
  for (double c : h.counts) occupied += c > 0 ? 1 : 0;
  if (occupied < 2) throw EstimationError("degenerate histogram: all counts in one bin");

  const double g = h.bin_average_factor();
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (std::size_t j = 0; j < n; ++j) {
    x(j, 0) = 1.0;
    x(j, 1) = g * std::sin(h.phase(j));
    x(j, 2) = g * std::cos(h.phase(j));
    y(j) = h.counts[j];
  }

  // iteratively reweighted: variance of each bin is its model mean
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  Eigen::Vector3d beta = Eigen::Vector3d::Zero();
  Eigen::Matrix3d normal;
  const double floor = std::max(total / static_cast<double>(n) * 1e-3, 1e-3);
  for (int it = 0; it < 4; ++it) {
    const Eigen::MatrixXd xw = w.asDiagonal() * x;
    normal = x.transpose() * xw;
    beta = normal.ldlt().solve(xw.transpose() * y);
    const Eigen::VectorXd mu = x * beta;
    for (std::size_t j = 0; j < n; ++j) w(j) = 1.0 / std::max(mu(j), floor);
  }
  const Eigen::Matrix3d cov = normal.inverse();

  SineFit fit;
  fit.offset = std::max(beta(0), 0.0);
  const double s = beta(1), c = beta(2);
  const double theta0 = std::hypot(s, c) > 0 ? std::atan2(c, s) : reference_phase;
  // component along the reference direction
  Eigen::Vector2d dir(std::cos(reference_phase), std::sin(reference_phase));
  fit.amplitude = dir.dot(Eigen::Vector2d(s, c));
  fit.phase = std::cos(theta0 - reference_phase) >= 0 ? theta0
                                                      : std::remainder(theta0 + kPi, kTwoPi);
  fit.amplitude_sigma = std::sqrt(std::max(dir.dot(cov.bottomRightCorner<2, 2>() * dir), 0.0));

  const Eigen::VectorXd mu = x * beta;
  double worst = 0.0;
  for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(mu(j) - y(j)));
  fit.max_residual = beta(0) > 0 ? worst / beta(0) : worst;
  return fit;
}

struct FlatnessTest {
  double chi2 = 0.0;
  int dof = 0;
  double p_value = 1.0;
  bool flat = true;
};

/// Pearson chi-squared test of a histogram against a constant rate.
inline FlatnessTest flatness_test(const PhaseHistogram& h, double significance = 0.05) {
  h.validate();
  const double mean = h.total() / static_cast<double>(h.bins());
  if (!(mean > 0)) throw EstimationError("histogram has no counts");
  FlatnessTest r;
  for (double c : h.counts) r.chi2 += (c - mean) * (c - mean) / mean;
  r.dof = static_cast<int>(h.bins()) - 1;
  boost::math::chi_squared dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.chi2));
  r.flat = r.p_value > significance;
  return r;
}

struct CompensationOptimum {
  double v_opt = 0.0;
  double v_sigma = 0.0;
  double slope = 0.0;      // amplitude per volt
  double intercept = 0.0;  // amplitude at 0 V
  std::optional<std::string> warning;
};

/// Weighted straight-line fit of signed amplitude against voltage; the
/// optimum is its root.
inline CompensationOptimum find_optimum(const CompensationScan& scan) {
  scan.validate();
  const std::size_t n = scan.points.size();
  bool weighted = true;
  for (const auto& p : scan.points) weighted = weighted && p.fit.amplitude_sigma > 0;

  double v_mean = 0.0;
  for (const auto& p : scan.points) v_mean += p.voltage;
  v_mean /= static_cast<double>(n);

  // centred abscissa keeps the normal matrix well conditioned at ~100 V
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : scan.points) {
    const double w = weighted ? 1.0 / (p.fit.amplitude_sigma * p.fit.amplitude_sigma) : 1.0;
    const double x = p.voltage - v_mean;
    sw += w;
    sx += w * x;
    sy += w * p.fit.amplitude;
    sxx += w * x * x;
    sxy += w * x * p.fit.amplitude;
  }
  const double det = sw * sxx - sx * sx;
  if (!(det > 0)) throw EstimationError("compensation scan is degenerate");
  const double beta = (sw * sxy - sx * sy) / det;
  const double alpha = (sxx * sy - sx * sxy) / det;
  if (beta == 0.0) throw EstimationError("amplitude does not depend on voltage");

  CompensationOptimum r;
  r.slope = beta;
  r.intercept = alpha - beta * v_mean;
  r.v_opt = v_mean - alpha / beta;
  if (weighted) {
    const double var_a = sxx / det, var_b = sw / det, cov_ab = -sx / det;
    const double da = -1.0 / beta, db = alpha / (beta * beta);
    r.v_sigma = std::sqrt(std::max(da * da * var_a + db * db * var_b + 2 * da * db * cov_ab, 0.0));
  }

  bool positive = false, negative = false;
  for (const auto& p : scan.points) {
    positive = positive || p.fit.amplitude > 0;
    negative = negative || p.fit.amplitude < 0;
  }
  if (!(positive && negative)) r.warning = "no sign change in scan; optimum is extrapolated";
  return r;
}

struct ScanSimulation {
  std::vector<double> voltages;
  double v_opt = 101.6;             // V
  double depth_per_volt = 0.04;     // modulation depth gradient, 1/V
  double mean_rate = 20e3;          // detected counts/s
  double dwell = 27.0;              // s per voltage
  std::size_t bins = 32;
  double phase_offset = 0.0;        // rad
  FoldMode fold = FoldMode::full_period;

  static ScanSimulation reference_scan() {
    ScanSimulation s;
    for (int i = 0; i <= 10; ++i) s.voltages.push_back(97.5 + 0.7 * i);
    return s;
  }
};

/// Synthetic compensation scan with a modulation depth linear in the
/// distance from the optimum.
inline CompensationScan simulate_scan(const ScanSimulation& sim, std::uint64_t seed,
                                      std::vector<PhaseHistogram>* histograms = nullptr) {
  std::mt19937_64 rng(seed);
  CompensationScan scan;
  for (double v : sim.voltages) {
    const double depth = std::clamp(sim.depth_per_volt * (v - sim.v_opt), -1.0, 1.0);
    auto h = simulate_histogram(depth, sim.mean_rate, sim.dwell, sim.bins, rng, sim.phase_offset,
                                sim.fold);
    scan.points.push_back({v, fit_sine(h, sim.phase_offset)});
    if (histograms) histograms->push_back(std::move(h));
  }
  return scan;
}

}  // namespace pcbtrap
