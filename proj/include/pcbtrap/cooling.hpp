#pragma once

// Doppler-cooling fluorescence model: two-level scattering rate with
// saturation, detuning, Doppler shift and a Gaussian beam profile; forward
// simulation of post-transport fluorescence recovery and its inversion to a
// coherent motional energy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/trap_model.hpp"

namespace pcbtrap {

struct LaserParams {
  double wavelength = 397e-9;                   // m
  double gamma = kTwoPi * 21.6e6;               // rad/s, natural linewidth
  double detuning = -0.5 * kTwoPi * 21.6e6;     // rad/s
  double s0 = 1.0;                              // peak saturation parameter
  double waist = 60e-6;                         // m
  double k_axial = 1.0 / std::numbers::sqrt2;   // projection of k on the trap axis
  double detection_efficiency = 0.40;
  double collection_efficiency = 1.0;           // solid angle and optics; calibrated

  double wavenumber() const { return kTwoPi / wavelength; }
  double total_efficiency() const { return detection_efficiency * collection_efficiency; }

  void validate() const {
    if (!(waist > 0)) throw InvalidInput("beam waist must be positive");
    if (!(s0 >= 0)) throw InvalidInput("saturation parameter must be non-negative");
    if (!(detection_efficiency > 0) || detection_efficiency > 1)
      throw InvalidInput("detection efficiency must lie in (0, 1]");
    if (!(collection_efficiency > 0) || collection_efficiency > 1)
      throw InvalidInput("collection efficiency must lie in (0, 1]");
    if (!(gamma > 0) || !(wavelength > 0)) throw InvalidInput("invalid transition parameters");
  }
};

/// Photons scattered per second by an ion at position z moving with axial velocity v.
inline double scattering_rate(double v, double z, const LaserParams& laser) {
  const double s = laser.s0 * std::exp(-2.0 * z * z / (laser.waist * laser.waist));
  const double delta = laser.detuning - laser.k_axial * laser.wavenumber() * v;
  const double x = 2.0 * delta / laser.gamma;
  return 0.5 * laser.gamma * s / (1.0 + s + x * x);
}

inline double detected_rate(double v, double z, const LaserParams& laser) {
  return scattering_rate(v, z, laser) * laser.total_efficiency();
}

/// Sets the collection efficiency so that an ion at rest in the beam centre
/// yields `target_counts_per_s` detected photons.
inline LaserParams calibrate_collection(LaserParams laser, double target_counts_per_s) {
  const double r = scattering_rate(0.0, 0.0, laser) * laser.detection_efficiency;
  if (!(r > 0)) throw InvalidInput("laser produces no scattering");
  laser.collection_efficiency = target_counts_per_s / r;
  laser.validate();
  return laser;
}

/// hbar Gamma / 2, in eV.
inline double doppler_limit_energy(const LaserParams& laser) {
  return to_ev(0.5 * kHbar * laser.gamma);
}

struct HeatingModel {
  double rate = 3e-3;  // eV/s
  double quantum = to_ev(kHbar * kTwoPi * 200e3);  // eV per motional quantum

  void validate() const {
    if (!(rate >= 0)) throw InvalidInput("heating rate must be non-negative");
    if (!(quantum > 0)) throw InvalidInput("heating quantum must be positive");
  }
};

/// Energy after `duration` of heating; with an RNG the gain is a Poisson
/// number of motional quanta.
inline double apply_heating(double energy_ev, const HeatingModel& model, double duration,
                            std::mt19937_64* rng = nullptr) {
  model.validate();
  if (!(duration >= 0)) throw InvalidInput("heating duration must be non-negative");
  const double mean = model.rate * duration;
  if (!rng || mean == 0.0) return energy_ev + mean;
  std::poisson_distribution<long long> quanta(mean / model.quantum);
  return energy_ev + static_cast<double>(quanta(*rng)) * model.quantum;
}

struct CycleAverage {
  double rate = 0.0;   // photons/s averaged over one oscillation
  double power = 0.0;  // J/s, net energy change (cooling plus recoil heating)
};

/// Scattering rate and energy flow averaged over one period of a coherent
/// oscillation z = A cos(theta), v = -A omega sin(theta) of energy E (J).
inline CycleAverage cycle_average(double energy, const LaserParams& laser, double omega,
                                  const IonSpecies& species, int nodes = 64) {
  const double amp = std::sqrt(2.0 * std::max(energy, 0.0) / (species.mass * omega * omega));
  const double k = laser.wavenumber();
  const double recoil = (kHbar * k) * (kHbar * k) / (2.0 * species.mass);
  const double recoil_factor = laser.k_axial * laser.k_axial + 1.0 / 3.0;
  double rate = 0.0, friction = 0.0;
  for (int j = 0; j < nodes; ++j) {
    const double theta = kPi * (j + 0.5) / nodes;
    const double z = amp * std::cos(theta);
    const double v = amp * omega * std::sin(theta);
    const double r_plus = scattering_rate(v, z, laser);
    const double r_minus = scattering_rate(-v, z, laser);
    rate += 0.5 * (r_plus + r_minus);
    friction += 0.5 * (r_plus - r_minus) * v;
  }
  rate /= nodes;
  friction *= kHbar * k * laser.k_axial / nodes;
  return {rate, friction + recoil * recoil_factor * rate};
}

/// Energy (J) at which laser cooling balances recoil heating.
inline double equilibrium_energy(const LaserParams& laser, double omega, const IonSpecies& species) {
  auto p = [&](double log_e) { return cycle_average(std::exp(log_e), laser, omega, species).power; };
  double lo = std::log(to_joule(1e-12));
  double hi = std::log(to_joule(1e-2));
  if (p(lo) <= 0) return std::exp(lo);
  if (p(hi) >= 0) throw InvalidInput("laser does not cool (blue detuning?)");
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (p(mid) > 0 ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

struct FluorescenceTrace {
  double bin = 0.0;               // s
  std::vector<double> rate;       // detected counts/s per bin, bin j covers [j bin, (j+1) bin)
  double steady_state_rate = 0.0; // counts/s
  std::optional<double> t_recover;  // s

  double time(std::size_t j) const { return (static_cast<double>(j) + 0.5) * bin; }
  double duration() const { return bin * static_cast<double>(rate.size()); }
};

inline constexpr double kRecoverFraction = 0.9;

/// First crossing of 90 % of the steady-state rate, linearly interpolated
/// between bin centres.
inline std::optional<double> recovery_crossing(const std::vector<double>& rate, double bin,
                                               double steady) {
  const double level = kRecoverFraction * steady;
  for (std::size_t j = 0; j < rate.size(); ++j) {
    if (rate[j] >= level) {
      if (j == 0) return 0.0;
      const double f = (level - rate[j - 1]) / (rate[j] - rate[j - 1]);
      const double t0 = (static_cast<double>(j) - 0.5) * bin;
      return std::max(0.0, t0 + f * bin);
    }
  }
  return std::nullopt;
}

/// Steady state of a measured trace: mean rate over its final 10 %.
inline double tail_mean(const std::vector<double>& rate) {
  if (rate.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, rate.size() / 10);
  double s = 0.0;
  for (std::size_t j = rate.size() - n; j < rate.size(); ++j) s += rate[j];
  return s / static_cast<double>(n);
}

/// Merges groups of `factor` adjacent bins; a trailing partial group is dropped.
inline FluorescenceTrace rebin(const FluorescenceTrace& in, std::size_t factor) {
  if (factor < 1) throw InvalidInput("rebin factor must be at least 1");
  FluorescenceTrace out;
  out.bin = in.bin * static_cast<double>(factor);
  out.steady_state_rate = in.steady_state_rate;
  for (std::size_t j = 0; j + factor <= in.rate.size(); j += factor) {
    double s = 0.0;
    for (std::size_t k = 0; k < factor; ++k) s += in.rate[j + k];
    out.rate.push_back(s / static_cast<double>(factor));
  }
  out.t_recover = recovery_crossing(out.rate, out.bin, out.steady_state_rate);
  return out;
}

struct RecoveryOptions {
  bool thermal = false;    // average over a thermal energy distribution
  int thermal_members = 16;
  std::optional<std::uint64_t> shot_noise_seed;  // Poisson counts per bin when set
  bool stop_at_recovery = false;                 // truncate once the crossing is found
};

/// Forward model: laser cooling of a coherent oscillation of initial energy
/// e0 (eV), evolved with cycle-averaged cooling power.
inline FluorescenceTrace simulate_recovery(double e0, const LaserParams& laser, double omega_z,
                                           const IonSpecies& species, double duration, double bin,
                                           const RecoveryOptions& opt = {}) {
  laser.validate();
  species.validate();
  if (!(e0 >= 0)) throw InvalidInput("initial energy must be non-negative");
  if (!(bin > 0) || !(duration >= bin)) throw InvalidInput("invalid trace binning");
  const auto n_bins = static_cast<std::size_t>(std::llround(duration / bin));
  const double e_eq = equilibrium_energy(laser, omega_z, species);
  const double eff = laser.total_efficiency();

  FluorescenceTrace trace;
  trace.bin = bin;
  trace.rate.assign(n_bins, 0.0);
  trace.steady_state_rate = cycle_average(e_eq, laser, omega_z, species).rate * eff;

  std::vector<double> members;
  if (opt.thermal && e0 > 0) {
    const int k = std::max(1, opt.thermal_members);
    for (int j = 0; j < k; ++j)
      members.push_back(-to_joule(e0) * std::log(1.0 - (j + 0.5) / k));
  } else {
    members.push_back(to_joule(e0));
  }

  std::vector<double> photons(n_bins, 0.0);
  // Integrate each member with RK4 in log-energy; rates are linear between
  // steps when deposited into bins.
  for (double e_start : members) {
    double e = std::max(e_start, e_eq);
    double t = 0.0;
    auto rhs = [&](double log_e) {
      const auto c = cycle_average(std::exp(log_e), laser, omega_z, species);
      return c.power / std::exp(log_e);
    };
    double r_prev = cycle_average(e, laser, omega_z, species).rate;
    const double settle = e_eq * 1.02;
    double log_e = std::log(e);
    while (t < duration) {
      if (std::exp(log_e) <= settle) {
        // steady state for the remainder of the trace
        const double r_eq = cycle_average(e_eq, laser, omega_z, species).rate;
        const double t_from = t;
        for (auto j = static_cast<std::size_t>(t_from / bin); j < n_bins; ++j) {
          const double a = std::max(t_from, static_cast<double>(j) * bin);
          const double b = static_cast<double>(j + 1) * bin;
          if (b > a) photons[j] += r_eq * (b - a);
        }
        break;
      }
      const double k1 = rhs(log_e);
      double h = std::min({0.01 / std::max(std::abs(k1), 1e-300), 4.0 * bin, duration - t});
      const double k2 = rhs(log_e + 0.5 * h * k1);
      const double k3 = rhs(log_e + 0.5 * h * k2);
      const double k4 = rhs(log_e + h * k3);
      double next = log_e + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      if (next < std::log(e_eq)) next = std::log(e_eq);
      const double r_next = cycle_average(std::exp(next), laser, omega_z, species).rate;
      // deposit the linear rate segment [t, t+h] into bins
      const double t1 = t + h;
      double a = t;
      auto j = static_cast<std::size_t>(a / bin);
      while (a < t1 && j < n_bins) {
        const double b = std::min(t1, static_cast<double>(j + 1) * bin);
        const double ra = r_prev + (r_next - r_prev) * (a - t) / h;
        const double rb = r_prev + (r_next - r_prev) * (b - t) / h;
        photons[j] += 0.5 * (ra + rb) * (b - a);
        a = b;
        ++j;
      }
      t = t1;
      log_e = next;
      r_prev = r_next;
      if (opt.stop_at_recovery && r_next * eff >= kRecoverFraction * trace.steady_state_rate &&
          t > 2.0 * bin) {
        // keep one more bin past the crossing so the interpolation is defined
        const auto last = std::min(n_bins, static_cast<std::size_t>(t / bin) + 2);
        for (auto jj = static_cast<std::size_t>(t / bin); jj < last; ++jj) {
          const double lo = std::max(t, static_cast<double>(jj) * bin);
          const double hi = static_cast<double>(jj + 1) * bin;
          if (hi > lo) photons[jj] += r_next * (hi - lo);
        }
        trace.rate.resize(last);
        photons.resize(last);
        break;
      }
    }
  }

  const double norm = eff / (bin * static_cast<double>(members.size()));
  for (std::size_t j = 0; j < trace.rate.size(); ++j) trace.rate[j] = photons[j] * norm;
  if (opt.shot_noise_seed) {
    std::mt19937_64 rng(*opt.shot_noise_seed);
    for (auto& r : trace.rate) {
      std::poisson_distribution<long long> counts(r * bin);
      r = static_cast<double>(counts(rng)) / bin;
    }
  }
  trace.t_recover = recovery_crossing(trace.rate, bin, trace.steady_state_rate);
  return trace;
}

struct EnergyEstimate {
  double e0 = 0.0;           // eV
  double uncertainty = 0.0;  // eV
  double waist_term = 0.0;
  double saturation_term = 0.0;
  double detuning_term = 0.0;
};

struct EstimatorUncertainties {
  double waist = 10e-6;                 // m
  double saturation_fraction = 0.15;    // relative
  double detuning = kTwoPi * 30e6;      // rad/s
  double linearization = 0.1;           // finite-difference step as a fraction of each uncertainty
};

namespace detail {
inline double model_recovery_time(double e0, const LaserParams& laser, double omega_z,
                                  const IonSpecies& species, double duration, double bin) {
  RecoveryOptions opt;
  opt.stop_at_recovery = true;
  const auto tr = simulate_recovery(e0, laser, omega_z, species, duration, bin, opt);
  return tr.t_recover.value_or(duration);
}

inline double invert_recovery(double t_obs, const LaserParams& laser, double omega_z,
                              const IonSpecies& species, double duration, double bin) {
  auto f = [&](double log_e) {
    return model_recovery_time(std::exp(log_e), laser, omega_z, species, duration, bin) - t_obs;
  };
  double lo = std::log(std::max(to_ev(equilibrium_energy(laser, omega_z, species)) * 1.5, 1e-9));
  double hi = std::log(1.0);
  if (f(lo) > 0) return std::exp(lo);
  if (f(hi) < 0) throw EstimationError("recovery time exceeds the model range");
  std::uintmax_t iters = 100;
  auto tol = [](double a, double b) { return std::abs(b - a) < 1e-6; };
  auto r = boost::math::tools::toms748_solve(f, lo, hi, tol, iters);
  return std::exp(0.5 * (r.first + r.second));
}
}  // namespace detail

/// Inverts the monotone map e0 -> t_recover of the forward model on the
/// trace's own binning, and propagates waist / saturation / detuning
/// uncertainties to first order.
inline EnergyEstimate estimate_energy(const FluorescenceTrace& trace, const LaserParams& laser,
                                      double omega_z, const IonSpecies& species,
                                      const EstimatorUncertainties& unc = {}) {
  if (!trace.t_recover) throw EstimationError("trace has no resolved recovery time");
  const double t_obs = *trace.t_recover;
  const double duration = trace.duration();
  const double bin = trace.bin;
  EnergyEstimate est;
  est.e0 = detail::invert_recovery(t_obs, laser, omega_z, species, duration, bin);

  auto sensitivity = [&](auto perturb, double sigma) {
    const double step = unc.linearization * sigma;
    LaserParams up = laser, down = laser;
    perturb(up, step);
    perturb(down, -step);
    const double e_up = detail::invert_recovery(t_obs, up, omega_z, species, duration, bin);
    const double e_down = detail::invert_recovery(t_obs, down, omega_z, species, duration, bin);
    return std::abs(e_up - e_down) / (2.0 * step) * sigma;
  };
  est.waist_term = sensitivity([](LaserParams& l, double d) { l.waist += d; }, unc.waist);
  est.saturation_term = sensitivity([](LaserParams& l, double d) { l.s0 *= 1.0 + d; },
                                    unc.saturation_fraction);
  est.detuning_term = sensitivity([](LaserParams& l, double d) { l.detuning += d; }, unc.detuning);
  est.uncertainty = std::sqrt(est.waist_term * est.waist_term +
                              est.saturation_term * est.saturation_term +
                              est.detuning_term * est.detuning_term);
  return est;
}

}  // namespace pcbtrap
