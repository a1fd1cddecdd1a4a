#pragma once

// Transport ramps, voltage synthesis for a target harmonic well, and the
// hardware realism applied to the resulting waveforms (zero-order hold,
// DAC quantization, RC low-pass).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/trap_model.hpp"

namespace pcbtrap {

/// Error-function out-and-back transport ramp.
struct RampSpec {
  double distance = 2e-3;                // d, one-way (m)
  double duration = 20e-6;               // T, round trip (s)
  double sigma = 2.0;                    // slope parameter
  double dt_update = 1e-6;               // DAC update interval (s)
  double omega_target = kTwoPi * 200e3;  // rad/s

  /// Round-trip duration in units of the secular period.
  double tau() const { return duration * omega_target / kTwoPi; }

  static RampSpec from_tau(double tau, double sigma = 2.0, double omega = kTwoPi * 200e3,
                           double distance = 2e-3, double dt_update = 1e-6) {
    RampSpec r;
    r.distance = distance;
    r.sigma = sigma;
    r.omega_target = omega;
    r.dt_update = dt_update;
    r.duration = tau * kTwoPi / omega;
    return r;
  }

  void validate() const {
    if (!(duration > 0)) throw InvalidInput("ramp duration must be positive");
    if (!(sigma > 0)) throw InvalidInput("ramp sigma must be positive");
    if (!(distance > 0)) throw InvalidInput("ramp distance must be positive");
    if (!(dt_update > 0)) throw InvalidInput("update interval must be positive");
    if (!(omega_target > 0)) throw InvalidInput("target frequency must be positive");
  }

  /// Number of update intervals covering the ramp: ceil(T / dt_update).
  std::size_t update_steps() const {
    return static_cast<std::size_t>(std::ceil(duration / dt_update - 1e-9));
  }
};

namespace detail {
// Outbound half: f(t) = d/2 (1 + erf((4t/T - 1) sigma) / erf(sigma)).
inline double erf_half(const RampSpec& r, double t) {
  return 0.5 * r.distance *
         (1.0 + std::erf((4.0 * t / r.duration - 1.0) * r.sigma) / std::erf(r.sigma));
}
inline double erf_half_velocity(const RampSpec& r, double t) {
  const double x = (4.0 * t / r.duration - 1.0) * r.sigma;
  return 0.5 * r.distance * (4.0 * r.sigma / r.duration) * (2.0 / std::sqrt(kPi)) *
         std::exp(-x * x) / std::erf(r.sigma);
}
}  // namespace detail

/// Well position z0(t). The return leg is the time mirror f(T - t) of the
/// outbound leg, which keeps z0 continuous at T/2.
inline double ramp_position(const RampSpec& r, double t) {
  if (!(t >= 0.0) || t > r.duration) throw InvalidInput("ramp time outside [0, T]");
  if (t <= 0.5 * r.duration) return detail::erf_half(r, t);
  return detail::erf_half(r, r.duration - t);
}

inline double ramp_velocity(const RampSpec& r, double t) {
  if (!(t >= 0.0) || t > r.duration) throw InvalidInput("ramp time outside [0, T]");
  if (t <= 0.5 * r.duration) return detail::erf_half_velocity(r, t);
  return -detail::erf_half_velocity(r, r.duration - t);
}

/// Sample time of update row k, clamped to the ramp end.
inline double update_time(const RampSpec& r, std::size_t k) {
  return std::min(static_cast<double>(k) * r.dt_update, r.duration);
}

/// Zero-order-hold well position: z0 at the most recent update instant.
inline double held_ramp_position(const RampSpec& r, double t) {
  if (t >= r.duration) return ramp_position(r, r.duration);
  const auto k = static_cast<std::size_t>(std::floor(t / r.dt_update + 1e-9));
  return ramp_position(r, update_time(r, k));
}

struct SolverConfig {
  double lambda = 1e-5;           // Tikhonov weight on |U|^2 (V^-2 relative to mean-square fit residual)
  double v_min = -10.0;           // V
  double v_max = 10.0;            // V
  double fit_window = 0.75e-3;    // m, half-width of the matched region around z0
  int fit_samples = 61;           // harmonic-target samples across the window
  double constraint_weight = 1e8; // penalty on slope / curvature mismatch at z0; 0 disables
  double stray_field = 0.0;       // V/m, uniform axial stray field
  double omega_tolerance = 0.01;  // relative
  double position_tolerance = 1e-6;  // m

  void validate() const {
    if (!(v_min < v_max)) throw InvalidInput("v_min must be below v_max");
    if (!(lambda >= 0)) throw InvalidInput("lambda must be non-negative");
    if (!(fit_window > 0) || fit_samples < 3) throw InvalidInput("invalid fit window");
    if (!(constraint_weight >= 0)) throw InvalidInput("constraint weight must be non-negative");
  }
};

struct WellTarget {
  double z0 = 0.0;     // m
  double omega = 0.0;  // rad/s
};

struct SolveResult {
  std::vector<double> voltages;
  double achieved_omega = 0.0;
  double achieved_z_min = 0.0;
  std::size_t clipped = 0;
};

namespace detail {

// Fixed curvature scale that makes the constraint rows dimensionless.
inline double reference_curvature(const IonSpecies& species) {
  return species.curvature_for(kTwoPi * 100e3);
}

struct LeastSquaresSystem {
  Eigen::MatrixXd a;  // columns: electrodes..., offset
  Eigen::VectorXd b;
};

// Stacked rows: weighted window samples, Tikhonov rows, then slope and
// curvature constraint rows at z0.
inline LeastSquaresSystem build_system(const AxialBasis& basis, const WellTarget& target,
                                       const SolverConfig& cfg, const IonSpecies& species) {
  const auto ne = static_cast<Eigen::Index>(basis.electrode_count());
  const int ns = cfg.fit_samples;
  const bool constrained = cfg.constraint_weight > 0;
  const Eigen::Index rows = ns + ne + (constrained ? 2 : 0);
  LeastSquaresSystem sys{Eigen::MatrixXd::Zero(rows, ne + 1), Eigen::VectorXd::Zero(rows)};
  const double k_target = species.curvature_for(target.omega);
  const double w_fit = 1.0 / std::sqrt(static_cast<double>(ns));
  const auto& g = basis.grid();
  const double lo = std::max(g.front(), target.z0 - cfg.fit_window);
  const double hi = std::min(g.back(), target.z0 + cfg.fit_window);
  for (int k = 0; k < ns; ++k) {
    const double z = lo + (hi - lo) * k / (ns - 1);
    for (Eigen::Index i = 0; i < ne; ++i)
      sys.a(k, i) = w_fit * basis.value(static_cast<std::size_t>(i), z);
    sys.a(k, ne) = w_fit;
    sys.b(k) = w_fit * (0.5 * k_target * (z - target.z0) * (z - target.z0) + cfg.stray_field * z);
  }
  const double sl = std::sqrt(cfg.lambda);
  for (Eigen::Index i = 0; i < ne; ++i) sys.a(ns + i, i) = sl;
  if (constrained) {
    const double wc = std::sqrt(cfg.constraint_weight);
    const double k_ref = reference_curvature(species);
    const double slope_scale = k_ref * 1e-6;  // slope error of one micron of well offset
    const Eigen::Index r1 = ns + ne;
    for (Eigen::Index i = 0; i < ne; ++i) {
      sys.a(r1, i) = wc * basis.slope(static_cast<std::size_t>(i), target.z0) / slope_scale;
      sys.a(r1 + 1, i) = wc * basis.curvature(static_cast<std::size_t>(i), target.z0) / k_ref;
    }
    sys.b(r1) = wc * cfg.stray_field / slope_scale;
    sys.b(r1 + 1) = wc * k_target / k_ref;
  }
  return sys;
}

}  // namespace detail

/// Regularized least-squares objective minimized by solve_voltages, with the
/// potential offset eliminated. Exposed so that tests can brute-force it.
inline double solver_objective(const AxialBasis& basis, const WellTarget& target,
                               const SolverConfig& cfg, const IonSpecies& species,
                               std::span<const double> u) {
  auto sys = detail::build_system(basis, target, cfg, species);
  const auto ne = static_cast<Eigen::Index>(basis.electrode_count());
  Eigen::VectorXd x(ne + 1);
  for (Eigen::Index i = 0; i < ne; ++i) x(i) = u[static_cast<std::size_t>(i)];
  x(ne) = 0.0;
  Eigen::VectorXd r = sys.a * x - sys.b;
  // optimal offset for these voltages
  const Eigen::Index ns = cfg.fit_samples;
  const double w = sys.a(0, ne);
  const double c = -r.head(ns).sum() / (w * static_cast<double>(ns));
  r.head(ns).array() += w * c;
  return r.squaredNorm();
}

/// Voltages realizing a harmonic well of frequency `omega` centred at z0.
inline SolveResult solve_voltages(const AxialBasis& basis, const WellTarget& target,
                                  const SolverConfig& cfg, const IonSpecies& species) {
  cfg.validate();
  species.validate();
  if (!basis.grid().contains(target.z0)) throw InvalidInput("target z0 outside the basis grid");
  if (!(target.omega >= 0)) throw InvalidInput("target frequency must be non-negative");
  const auto ne = static_cast<Eigen::Index>(basis.electrode_count());
  const auto sys = detail::build_system(basis, target, cfg, species);

  auto solve_free = [&](const std::vector<bool>& fixed, const Eigen::VectorXd& fixed_values) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index i = 0; i <= ne; ++i)
      if (i == ne || !fixed[static_cast<std::size_t>(i)]) cols.push_back(i);
    Eigen::MatrixXd a(sys.a.rows(), static_cast<Eigen::Index>(cols.size()));
    Eigen::VectorXd b = sys.b;
    for (Eigen::Index i = 0; i < ne; ++i)
      if (fixed[static_cast<std::size_t>(i)]) b -= sys.a.col(i) * fixed_values(i);
    for (std::size_t c = 0; c < cols.size(); ++c)
      a.col(static_cast<Eigen::Index>(c)) = sys.a.col(cols[c]);
    Eigen::VectorXd y = a.completeOrthogonalDecomposition().solve(b);
    Eigen::VectorXd x = fixed_values;
    for (std::size_t c = 0; c < cols.size(); ++c) x(cols[c]) = y(static_cast<Eigen::Index>(c));
    return x;
  };

  std::vector<bool> fixed(static_cast<std::size_t>(ne), false);
  Eigen::VectorXd x = solve_free(fixed, Eigen::VectorXd::Zero(ne + 1));

  // One clip-and-re-solve pass on the active set.
  SolveResult result;
  Eigen::VectorXd fixed_values = Eigen::VectorXd::Zero(ne + 1);
  bool any = false;
  for (Eigen::Index i = 0; i < ne; ++i) {
    if (x(i) > cfg.v_max || x(i) < cfg.v_min) {
      fixed[static_cast<std::size_t>(i)] = true;
      fixed_values(i) = std::clamp(x(i), cfg.v_min, cfg.v_max);
      any = true;
      ++result.clipped;
    }
  }
  if (any) {
    x = solve_free(fixed, fixed_values);
    for (Eigen::Index i = 0; i < ne; ++i) {
      if (x(i) > cfg.v_max || x(i) < cfg.v_min) {
        x(i) = std::clamp(x(i), cfg.v_min, cfg.v_max);
        ++result.clipped;
      }
    }
  }
  result.voltages.assign(x.data(), x.data() + ne);

  if (target.omega > 0 && cfg.constraint_weight > 0) {
    const AxialPotential pot(basis, result.voltages, cfg.stray_field);
    const auto& g = basis.grid();
    const double lo = std::max(g.front(), target.z0 - cfg.fit_window);
    const double hi = std::min(g.back(), target.z0 + cfg.fit_window);
    try {
      const auto well = well_analysis(pot, species, lo, hi);
      result.achieved_omega = well.omega_z;
      result.achieved_z_min = well.z_min;
    } catch (const NoWellError&) {
      throw InfeasibleError("synthesized potential has no well near the target", 0.0,
                            target.z0);
    }
    const bool ok =
        std::abs(result.achieved_omega - target.omega) <= cfg.omega_tolerance * target.omega &&
        std::abs(result.achieved_z_min - target.z0) <= cfg.position_tolerance;
    if (!ok)
      throw InfeasibleError("voltage bounds prevent meeting the well tolerance",
                            result.achieved_omega, result.achieved_z_min);
  }
  return result;
}

struct DacSpec {
  int bits = 16;
  double v_min = -10.0;
  double v_max = 10.0;
  double update_rate = 1e6;  // Hz

  double lsb() const { return (v_max - v_min) / std::ldexp(1.0, bits); }

  void validate() const {
    if (bits < 8) throw InvalidInput("DAC resolution must be at least 8 bits");
    if (!(v_min < v_max)) throw InvalidInput("DAC range is empty");
  }
};

/// Electrode voltages sampled at a fixed update interval, row k at t0 + k dt.
struct VoltageWaveform {
  std::vector<std::vector<double>> steps;
  double dt = 1e-6;
  double t0 = 0.0;
  bool quantized = false;
  int dac_bits = 0;
  bool filtered = false;
  bool saturated = false;

  std::size_t rows() const noexcept { return steps.size(); }
  std::size_t electrodes() const noexcept { return steps.empty() ? 0 : steps.front().size(); }
  double time(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
  double end_time() const { return steps.empty() ? t0 : time(steps.size() - 1); }

  /// Row in force at time t under zero-order hold.
  std::size_t row_at(double t) const {
    if (t <= t0) return 0;
    const auto k = static_cast<std::size_t>(std::floor((t - t0) / dt + 1e-9));
    return std::min(k, steps.size() - 1);
  }
};

/// Rounds every entry to the nearest DAC code; out-of-range entries saturate.
inline VoltageWaveform quantize(VoltageWaveform w, const DacSpec& dac) {
  dac.validate();
  const double lsb = dac.lsb();
  for (auto& row : w.steps) {
    for (auto& u : row) {
      if (u > dac.v_max || u < dac.v_min) {
        w.saturated = true;
        u = std::clamp(u, dac.v_min, dac.v_max);
      }
      u = std::nearbyint(u / lsb) * lsb;
      // the top code can round one LSB past full scale
      if (u > dac.v_max) u -= lsb;
    }
  }
  w.quantized = true;
  w.dac_bits = dac.bits;
  return w;
}

/// One voltage solve per update instant; the return leg reuses outbound rows.
inline VoltageWaveform generate_waveform(const AxialBasis& basis, const RampSpec& spec,
                                         const SolverConfig& cfg, const IonSpecies& species,
                                         const std::optional<DacSpec>& dac = std::nullopt) {
  spec.validate();
  const std::size_t n_steps = spec.update_steps();
  VoltageWaveform w;
  w.dt = spec.dt_update;
  w.steps.resize(n_steps + 1);
  const double ratio = spec.duration / spec.dt_update;
  const bool commensurate = std::abs(ratio - std::round(ratio)) < 1e-9;
  for (std::size_t k = 0; k <= n_steps; ++k) {
    if (commensurate && 2 * k > n_steps) {
      w.steps[k] = w.steps[n_steps - k];
      continue;
    }
    const double t = update_time(spec, k);
    try {
      w.steps[k] = solve_voltages(basis, {ramp_position(spec, t), spec.omega_target}, cfg,
                                  species)
                       .voltages;
    } catch (const InfeasibleError& e) {
      throw InfeasibleError(std::string(e.what()) + " at update step " + std::to_string(k),
                            e.achieved_omega, e.achieved_z_min, static_cast<long>(k));
    }
  }
  if (dac) w = quantize(std::move(w), *dac);
  return w;
}

/// Linear interpolation between two voltage sets, endpoints included.
inline VoltageWaveform morph(std::span<const double> from, std::span<const double> to,
                             std::size_t steps, double dt) {
  if (from.size() != to.size()) throw InvalidInput("morph endpoints differ in length");
  if (steps < 1) throw InvalidInput("morph needs at least one step");
  if (!(dt > 0)) throw InvalidInput("morph step must be positive");
  VoltageWaveform w;
  w.dt = dt;
  w.steps.resize(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    const double s = static_cast<double>(k) / static_cast<double>(steps);
    auto& row = w.steps[k];
    row.resize(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
      row[i] = k == steps ? to[i] : from[i] + s * (to[i] - from[i]);
    }
  }
  return w;
}

/// Concatenates waveforms sharing one update interval; the first row of each
/// appended piece replaces the last row of the previous one.
inline VoltageWaveform concatenate(std::span<const VoltageWaveform> parts) {
  if (parts.empty()) throw InvalidInput("nothing to concatenate");
  VoltageWaveform out = parts.front();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const auto& w = parts[p];
    if (std::abs(w.dt - out.dt) > 1e-15 || w.electrodes() != out.electrodes())
      throw InvalidInput("waveforms differ in update interval or electrode count");
    out.steps.pop_back();
    out.steps.insert(out.steps.end(), w.steps.begin(), w.steps.end());
    out.quantized = out.quantized && w.quantized;
    out.saturated = out.saturated || w.saturated;
  }
  return out;
}

/// First-order RC response of each electrode to the zero-order-hold input,
/// resampled `oversample` times per update interval.
inline VoltageWaveform lowpass(const VoltageWaveform& in, double corner_hz, int oversample = 50) {
  if (!(corner_hz > 0)) throw InvalidInput("corner frequency must be positive");
  if (oversample < 1) throw InvalidInput("oversample must be at least 1");
  VoltageWaveform out = in;
  out.filtered = true;
  out.dt = in.dt / oversample;
  out.steps.clear();
  if (in.steps.empty()) return out;
  const double rc = 1.0 / (kTwoPi * corner_hz);
  const double decay = std::isinf(corner_hz) ? 0.0 : std::exp(-out.dt / rc);
  std::vector<double> y = in.steps.front();
  out.steps.push_back(y);
  for (std::size_t k = 0; k + 1 < in.steps.size(); ++k) {
    const auto& u = in.steps[k];
    for (int s = 1; s <= oversample; ++s) {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = u[i] + (y[i] - u[i]) * decay;
      out.steps.push_back(y);
    }
  }
  return out;
}

}  // namespace pcbtrap
