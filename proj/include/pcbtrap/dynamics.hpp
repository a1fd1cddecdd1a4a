#pragma once

// Classical one-dimensional ion motion in the time-dependent axial potential.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/trap_model.hpp"
#include "pcbtrap/waveform.hpp"

namespace pcbtrap {

struct IonState {
  double z = 0.0;  // m
  double v = 0.0;  // m/s
  double t = 0.0;  // s
};

struct Trajectory {
  std::vector<IonState> samples;
  std::vector<double> energy;        // J, relative to the instantaneous well minimum
  std::vector<double> well_position; // m, instantaneous well minimum
  bool lost = false;
  std::optional<double> loss_time;

  const IonState& final_state() const { return samples.back(); }
  double max_energy() const {
    return energy.empty() ? 0.0 : *std::max_element(energy.begin(), energy.end());
  }
};

struct TransportResult {
  double e_final = 0.0;        // eV
  double e_max = 0.0;          // eV
  double max_excursion = 0.0;  // m
  bool lost = false;
};

inline TransportResult summarize(const Trajectory& tr) {
  TransportResult r;
  r.lost = tr.lost;
  if (tr.samples.empty()) return r;
  r.e_final = to_ev(tr.energy.back());
  r.e_max = to_ev(tr.max_energy());
  for (std::size_t i = 0; i < tr.samples.size(); ++i)
    r.max_excursion = std::max(r.max_excursion, std::abs(tr.samples[i].z - tr.well_position[i]));
  return r;
}

/// Largest potential energy above the instantaneous minimum, in eV.
inline double max_potential_energy(const Trajectory& tr, const IonSpecies& species) {
  double e = 0.0;
  for (std::size_t i = 0; i < tr.samples.size(); ++i) {
    const double v = tr.samples[i].v;
    e = std::max(e, tr.energy[i] - 0.5 * species.mass * v * v);
  }
  return to_ev(e);
}

/// Moving harmonic well z0(t), either sampled-and-held at the update interval
/// or continuous.
struct HarmonicDrive {
  std::function<double(double)> position;
  double omega = 0.0;
  double end_time = 0.0;
  double hold_interval = 0.0;  // 0 for a continuous drive

  bool held() const { return hold_interval > 0; }
};

inline HarmonicDrive harmonic_drive(const RampSpec& spec, bool hold) {
  spec.validate();
  HarmonicDrive d;
  d.omega = spec.omega_target;
  if (hold) {
    d.hold_interval = spec.dt_update;
    d.end_time = static_cast<double>(spec.update_steps()) * spec.dt_update;
    d.position = [spec](double t) { return held_ramp_position(spec, t); };
  } else {
    d.end_time = spec.duration;
    d.position = [spec](double t) { return ramp_position(spec, std::clamp(t, 0.0, spec.duration)); };
  }
  return d;
}

struct IntegrationOptions {
  std::size_t record_stride = 1;
  double blowup_factor = 1e6;
};

namespace detail {
inline std::size_t substeps(double interval, double dt_int) {
  return static_cast<std::size_t>(std::ceil(interval / dt_int - 1e-9));
}
}  // namespace detail

/// Velocity-Verlet integration of z'' = -omega^2 (z - z0(t)). For a held
/// drive every integration step lies inside one hold interval.
inline Trajectory integrate_harmonic(const HarmonicDrive& drive, const IonSpecies& species,
                                     const IonState& initial, double dt_int,
                                     IntegrationOptions opt = {}) {
  species.validate();
  if (!(dt_int > 0)) throw InvalidInput("integration step must be positive");
  const double w2 = drive.omega * drive.omega;
  const double duration = drive.end_time - initial.t;
  if (duration < 0) throw InvalidInput("initial time lies after the drive end");

  double h;
  std::size_t n;
  if (drive.held()) {
    const std::size_t per = detail::substeps(drive.hold_interval, dt_int);
    h = drive.hold_interval / static_cast<double>(per);
    n = static_cast<std::size_t>(std::llround(duration / h));
  } else {
    n = std::max<std::size_t>(1, detail::substeps(duration, dt_int));
    h = duration / static_cast<double>(n);
  }

  const double m = species.mass;
  auto energy_at = [&](double z, double v, double z0) {
    return 0.5 * m * v * v + 0.5 * m * w2 * (z - z0) * (z - z0);
  };

  Trajectory tr;
  double z = initial.z, v = initial.v, t = initial.t;
  double z0 = drive.position(drive.held() ? t + 0.5 * h : t);
  tr.samples.push_back({z, v, t});
  tr.well_position.push_back(z0);
  tr.energy.push_back(energy_at(z, v, z0));

  double z_span = 0.0;
  for (std::size_t k = 0; k <= 64; ++k) {
    const double s = initial.t + duration * static_cast<double>(k) / 64.0;
    z_span = std::max(z_span, std::abs(drive.position(s) - z));
  }
  const double scale = std::max(tr.energy.front(), 0.5 * m * w2 * z_span * z_span) +
                       std::numeric_limits<double>::min();

  for (std::size_t i = 0; i < n; ++i) {
    const double t_next = initial.t + static_cast<double>(i + 1) * h;
    double a0, a1;
    if (drive.held()) {
      z0 = drive.position(t + 0.5 * h);
      a0 = -w2 * (z - z0);
      v += 0.5 * h * a0;
      z += h * v;
      a1 = -w2 * (z - z0);
      v += 0.5 * h * a1;
    } else {
      a0 = -w2 * (z - drive.position(t));
      v += 0.5 * h * a0;
      z += h * v;
      z0 = drive.position(t_next);
      a1 = -w2 * (z - z0);
      v += 0.5 * h * a1;
    }
    t = t_next;
    if (drive.held()) z0 = drive.position(i + 1 == n ? drive.end_time : t + 0.5 * h);
    const double e = energy_at(z, v, z0);
    if (!std::isfinite(e) || e > opt.blowup_factor * scale)
      throw IntegrationError("harmonic integration became unstable");
    if ((i + 1) % opt.record_stride == 0 || i + 1 == n) {
      tr.samples.push_back({z, v, t});
      tr.well_position.push_back(z0);
      tr.energy.push_back(e);
    }
  }
  return tr;
}

/// Harmonic transport along the erf ramp, starting from rest at z0(0) unless
/// an initial state is given.
inline Trajectory integrate_harmonic(const RampSpec& spec, const IonSpecies& species,
                                     const IonState& initial, double dt_int, bool hold = true,
                                     IntegrationOptions opt = {}) {
  const double period = kTwoPi / spec.omega_target;
  if (dt_int > spec.dt_update / 20.0 + 1e-18 || dt_int > period / 100.0 + 1e-18)
    throw InvalidInput("integration step too coarse for the ramp");
  return integrate_harmonic(harmonic_drive(spec, hold), species, initial, dt_int, opt);
}

struct FullIntegrationOptions {
  std::size_t record_stride = 1;
  double extra_time = 0.0;  // s of integration beyond the last waveform row
};

/// Integrates z'' = -(Q/m) dphi/dz in the superposed basis potential driven by
/// a zero-order-hold waveform. Leaving the basis grid counts as loss.
inline Trajectory integrate_full(const AxialBasis& basis, const VoltageWaveform& waveform,
                                 const IonSpecies& species, const IonState& initial,
                                 double dt_int, FullIntegrationOptions opt = {},
                                 double stray_field = 0.0) {
  species.validate();
  if (waveform.steps.empty()) throw InvalidInput("empty waveform");
  if (waveform.electrodes() != basis.electrode_count())
    throw InvalidInput("waveform electrode count does not match the basis");
  if (!basis.grid().contains(initial.z)) throw InvalidInput("initial position outside the grid");
  if (!(dt_int > 0)) throw InvalidInput("integration step must be positive");

  const double qm = species.charge / species.mass;
  const double m = species.mass;
  const std::size_t per = detail::substeps(waveform.dt, dt_int);
  const double h = waveform.dt / static_cast<double>(per);
  const double t_end = std::max(waveform.end_time(), initial.t) + opt.extra_time;
  const auto n = static_cast<std::size_t>(std::llround((t_end - initial.t) / h));
  const auto& grid = basis.grid();

  std::size_t row = waveform.row_at(initial.t);
  AxialPotential pot(basis, waveform.steps[row], stray_field);
  double z_min = initial.z;
  double phi_min = 0.0;
  auto locate_minimum = [&]() {
    if (auto zm = descend_to_minimum(pot, z_min)) {
      z_min = *zm;
      phi_min = pot.value(z_min);
    } else {
      const auto s = pot.samples();
      const auto it = std::min_element(s.begin(), s.end());
      phi_min = *it;
      z_min = grid[static_cast<std::size_t>(it - s.begin())];
    }
  };
  locate_minimum();

  Trajectory tr;
  double z = initial.z, v = initial.v, t = initial.t;
  auto energy = [&]() { return 0.5 * m * v * v + species.charge * (pot.value(z) - phi_min); };
  tr.samples.push_back({z, v, t});
  tr.well_position.push_back(z_min);
  tr.energy.push_back(energy());

  for (std::size_t i = 0; i < n; ++i) {
    const double t_mid = initial.t + (static_cast<double>(i) + 0.5) * h;
    const std::size_t r = waveform.row_at(t_mid);
    if (r != row) {
      row = r;
      pot = AxialPotential(basis, waveform.steps[row], stray_field);
      locate_minimum();
    }
    v += -0.5 * h * qm * pot.slope(z);
    z += h * v;
    t = initial.t + static_cast<double>(i + 1) * h;
    if (!grid.contains(z)) {
      tr.lost = true;
      tr.loss_time = t;
      tr.samples.push_back({z, v, t});
      tr.well_position.push_back(z_min);
      tr.energy.push_back(0.5 * m * v * v + species.charge * (pot.value(std::clamp(z, grid.front(), grid.back())) - phi_min));
      return tr;
    }
    v += -0.5 * h * qm * pot.slope(z);
    // the row switching at this instant defines the energy reference
    const std::size_t r_next = waveform.row_at(t + 0.5 * h);
    if (r_next != row && i + 1 < n) {
      row = r_next;
      pot = AxialPotential(basis, waveform.steps[row], stray_field);
      locate_minimum();
    }
    if ((i + 1) % opt.record_stride == 0 || i + 1 == n) {
      tr.samples.push_back({z, v, t});
      tr.well_position.push_back(z_min);
      tr.energy.push_back(energy());
    }
  }
  return tr;
}

/// Final excitation of a harmonic oscillator dragged from rest by a well with
/// velocity u(t) on [0, T]: E = (m w^2 / 2) |int u(t) e^{i w t} dt|^2, in eV.
inline double fourier_energy(const std::function<double(double)>& velocity, double duration,
                             double omega, const IonSpecies& species,
                             std::span<const double> breakpoints = {}) {
  using boost::math::quadrature::gauss_kronrod;
  std::vector<double> cuts{0.0};
  for (double b : breakpoints)
    if (b > 0 && b < duration) cuts.push_back(b);
  cuts.push_back(duration);
  std::sort(cuts.begin(), cuts.end());
  double re = 0.0, im = 0.0;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    // split each piece so the integrand has few oscillations per panel
    const double span = cuts[k + 1] - cuts[k];
    const auto panels = static_cast<std::size_t>(std::ceil(span * omega / kTwoPi * 4.0)) + 1;
    for (std::size_t p = 0; p < panels; ++p) {
      const double a = cuts[k] + span * static_cast<double>(p) / static_cast<double>(panels);
      const double b = cuts[k] + span * static_cast<double>(p + 1) / static_cast<double>(panels);
      re += gauss_kronrod<double, 31>::integrate(
          [&](double t) { return velocity(t) * std::cos(omega * t); }, a, b, 6, 1e-11);
      im += gauss_kronrod<double, 31>::integrate(
          [&](double t) { return velocity(t) * std::sin(omega * t); }, a, b, 6, 1e-11);
    }
  }
  return to_ev(0.5 * species.mass * omega * omega * (re * re + im * im));
}

/// Final excitation of the continuous erf ramp, in eV.
inline double fourier_energy_oracle(const RampSpec& spec, const IonSpecies& species) {
  spec.validate();
  const double half = 0.5 * spec.duration;
  const double cuts[] = {half};
  return fourier_energy([&](double t) { return ramp_velocity(spec, std::clamp(t, 0.0, spec.duration)); },
                        spec.duration, spec.omega_target, species, cuts);
}

/// Energy-threshold loss proxy: lost once the energy exceeds a fraction of the well depth.
inline bool classify_loss(double max_energy_ev, double axial_depth_ev, double threshold_fraction) {
  if (!(threshold_fraction > 0) || threshold_fraction > 1)
    throw InvalidInput("threshold fraction must lie in (0, 1]");
  return max_energy_ev > threshold_fraction * axial_depth_ev;
}

inline bool classify_loss(const Trajectory& tr, double axial_depth_ev, double threshold_fraction) {
  return tr.lost || classify_loss(to_ev(tr.max_energy()), axial_depth_ev, threshold_fraction);
}

}  // namespace pcbtrap
