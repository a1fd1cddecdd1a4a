#pragma once

// Six-step transport measurement sequence, Monte Carlo repetition, sweeps and
// success-probability statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/cooling.hpp"
#include "pcbtrap/dynamics.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/trap_model.hpp"
#include "pcbtrap/waveform.hpp"

namespace pcbtrap {

enum class TransportModel { full, harmonic };

struct LoadConfiguration {
  std::vector<std::pair<int, double>> voltages{{7, 6.0}, {13, 8.0}};  // segment index, V
  int trim_segment = 9;     // adjusted so the loading minimum sits on the transport start
  double mismatch = 0.0;    // m, planted offset of the loading minimum
};

struct SequenceSpec {
  LoadConfiguration load;
  RampSpec ramp;
  SolverConfig solver;
  std::optional<DacSpec> dac = DacSpec{};
  std::size_t morph_steps = 10;
  double morph_dt = 1e-6;          // s per morph step
  std::size_t settle_before = 0;   // update intervals held between morph in and ramp
  std::size_t settle_after = 0;    // update intervals held between ramp and morph out
  LaserParams cooling;
  HeatingModel heating;
  double loss_threshold = 0.30;    // fraction of the well depth
  std::optional<double> loss_depth;  // eV; defaults to the computed transport-well depth
  std::uint64_t seed = 1;
  TransportModel model = TransportModel::full;
  bool transport = true;           // false replaces the ramp by an equal wait
  double integration_step = 20e-9; // s
  bool record_trace = false;
  double trace_duration = 20e-3;   // s
  double trace_bin = 10e-6;        // s
  double calibrated_rate = 20e3;   // detected counts/s of a cold ion

  void validate() const {
    ramp.validate();
    solver.validate();
    if (dac) dac->validate();
    cooling.validate();
    heating.validate();
    if (morph_steps < 1) throw InvalidInput("morph needs at least one step");
    if (!(morph_dt > 0)) throw InvalidInput("morph step must be positive");
    if (!(loss_threshold > 0) || loss_threshold > 1)
      throw InvalidInput("loss threshold must lie in (0, 1]");
    if (loss_depth && !(*loss_depth > 0)) throw InvalidInput("loss depth must be positive");
    if (!(integration_step > 0)) throw InvalidInput("integration step must be positive");
    if (record_trace && (!(trace_bin > 0) || !(trace_duration >= trace_bin)))
      throw InvalidInput("invalid fluorescence trace binning");
  }
};

struct SequenceOutcome {
  bool survived = true;
  bool escaped = false;        // left the modelled region
  double e_final = 0.0;        // eV, after heating
  double e_max = 0.0;          // eV
  double max_excursion = 0.0;  // m
  double wall_time = 0.0;      // s
  std::optional<FluorescenceTrace> trace;
};

/// Voltage set of the loading configuration with the trim electrode chosen so
/// that the minimum lies at `target`.
inline std::vector<double> loading_voltages(const AxialBasis& basis, const TrapGeometry& geometry,
                                            const LoadConfiguration& load, double target,
                                            const IonSpecies& species, const SolverConfig& cfg) {
  std::vector<double> u(basis.electrode_count(), 0.0);
  auto slot = [&](int index) {
    for (std::size_t i = 0; i < geometry.size(); ++i)
      if (geometry.segments[i].index == index) return i;
    throw InvalidInput("loading configuration names unknown segment " + std::to_string(index));
  };
  for (auto [index, v] : load.voltages) u[slot(index)] = v;
  if (load.trim_segment == 0) return u;
  const std::size_t trim = slot(load.trim_segment);
  const double base = u[trim];
  const auto& g = basis.grid();
  auto offset = [&](double dv) {
    u[trim] = base + dv;
    const auto w = well_analysis(superpose(basis, u, cfg.stray_field), species,
                                 std::max(g.front(), target - 2e-3),
                                 std::min(g.back(), target + 2e-3));
    return w.z_min - target;
  };
  const double f0 = offset(0.0);
  if (f0 == 0.0) return u;
  // widen the bracket until the minimum crosses the target
  double lo = 0.0, hi = 0.0, f_lo = f0, f_hi = f0;
  bool found = false;
  for (double step = 0.05; step <= 20.0 && !found; step *= 2.0) {
    for (double dv : {step, -step}) {
      double f;
      try {
        f = offset(dv);
      } catch (const NoWellError&) {
        continue;
      }
      if ((f > 0) != (f0 > 0)) {
        hi = dv;
        f_hi = f;
        found = true;
        break;
      }
    }
  }
  if (!found)
    throw InfeasibleError("trim electrode cannot place the loading minimum", 0.0, f0 + target);
  if (hi < lo) {
    std::swap(lo, hi);
    std::swap(f_lo, f_hi);
  }
  std::uintmax_t iters = 100;
  auto tol = [](double a, double b) { return std::abs(b - a) < 1e-12; };
  auto r = boost::math::tools::toms748_solve(offset, lo, hi, f_lo, f_hi, tol, iters);
  u[trim] = base + 0.5 * (r.first + r.second);
  return u;
}

/// Waveforms and well characteristics shared by every trial of a sequence.
struct SequencePlan {
  SequenceSpec spec;
  const AxialBasis* basis = nullptr;
  IonSpecies species;
  std::vector<double> load_voltages;
  WellCharacterization load_well;
  WellCharacterization transport_well;
  VoltageWaveform waveform;  // steps ii-v
  double loss_depth = 0.0;   // eV
  LaserParams laser;         // calibrated
};

inline SequencePlan plan_sequence(const AxialBasis& basis, const TrapGeometry& geometry,
                                  const SequenceSpec& spec,
                                  const IonSpecies& species = IonSpecies::calcium40()) {
  spec.validate();
  SequencePlan plan;
  plan.spec = spec;
  plan.basis = &basis;
  plan.species = species;
  plan.laser = calibrate_collection(spec.cooling, spec.calibrated_rate);

  auto ramp = generate_waveform(basis, spec.ramp, spec.solver, species, spec.dac);
  const std::vector<double> start = ramp.steps.front();
  const auto& g = basis.grid();
  auto window = [&](double z) {
    return std::pair{std::max(g.front(), z - 1.5e-3), std::min(g.back(), z + 1.5e-3)};
  };
  auto [ta, tb] = window(0.0);
  plan.transport_well =
      well_analysis(superpose(basis, start, spec.solver.stray_field), species, ta, tb);
  plan.loss_depth = spec.loss_depth.value_or(plan.transport_well.axial_depth);

  plan.load_voltages = loading_voltages(basis, geometry, spec.load,
                                        plan.transport_well.z_min + spec.load.mismatch, species,
                                        spec.solver);
  if (spec.dac)
    plan.load_voltages =
        quantize(VoltageWaveform{{plan.load_voltages}, spec.morph_dt}, *spec.dac).steps.front();
  auto [la, lb] = window(plan.transport_well.z_min);
  plan.load_well = well_analysis(superpose(basis, plan.load_voltages, spec.solver.stray_field),
                                 species, la, lb);

  if (!spec.transport) {
    const auto rows = ramp.steps.size();
    ramp.steps.assign(rows, start);
  }
  const auto& load = plan.load_voltages;
  const auto in = morph(load, start, spec.morph_steps, spec.morph_dt);
  const auto out = morph(ramp.steps.back(), load, spec.morph_steps, spec.morph_dt);
  if (std::abs(ramp.dt - spec.morph_dt) > 1e-15)
    throw InvalidInput("morph step must equal the DAC update interval");
  auto hold = [&](const std::vector<double>& u, std::size_t n) {
    return VoltageWaveform{std::vector<std::vector<double>>(n + 1, u), ramp.dt};
  };
  const VoltageWaveform parts[] = {in, hold(start, spec.settle_before), ramp,
                                   hold(ramp.steps.back(), spec.settle_after), out};
  plan.waveform = concatenate(parts);
  // morph rows are interpolated, so the DAC has to see every row
  if (spec.dac) plan.waveform = quantize(plan.waveform, *spec.dac);
  return plan;
}

namespace detail {
/// Independent stream per (seed, trial), identical in serial and parallel runs.
inline std::mt19937_64 trial_rng(std::uint64_t seed, std::uint64_t trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32)};
  return std::mt19937_64(seq);
}

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
}  // namespace detail

/// One repetition of the sequence: (i) Doppler-limit start with random phase
/// in the loading well, (ii) morph in, (iii-iv) out-and-back transport,
/// (v) morph out, heating over the wall time, (vi) fluorescence recovery.
inline SequenceOutcome run_trial(const SequencePlan& plan, std::uint64_t trial) {
  const auto& spec = plan.spec;
  auto rng = detail::trial_rng(spec.seed, trial);
  const double phase = kTwoPi * detail::unit_uniform(rng);
  const double e0 = to_joule(doppler_limit_energy(plan.laser));

  SequenceOutcome out;
  if (spec.model == TransportModel::full) {
    const double w = plan.load_well.omega_z;
    const double amp = std::sqrt(2.0 * e0 / (plan.species.mass * w * w));
    const IonState init{plan.load_well.z_min + amp * std::cos(phase), -amp * w * std::sin(phase),
                        0.0};
    FullIntegrationOptions fo;
    fo.record_stride = 1;
    const auto tr = integrate_full(*plan.basis, plan.waveform, plan.species, init,
                                   spec.integration_step, fo, spec.solver.stray_field);
    const auto s = summarize(tr);
    out.escaped = tr.lost;
    out.e_final = s.e_final;
    out.e_max = s.e_max;
    out.max_excursion = s.max_excursion;
    out.wall_time = plan.waveform.end_time();
  } else {
    const double w = spec.ramp.omega_target;
    const double amp = std::sqrt(2.0 * e0 / (plan.species.mass * w * w));
    const IonState init{amp * std::cos(phase), -amp * w * std::sin(phase), 0.0};
    auto drive = harmonic_drive(spec.ramp, true);
    if (!spec.transport) drive.position = [](double) { return 0.0; };
    const auto s = summarize(integrate_harmonic(drive, plan.species, init, spec.integration_step));
    out.e_final = s.e_final;
    out.e_max = s.e_max;
    out.max_excursion = s.max_excursion;
    out.wall_time = drive.end_time;
  }
  out.survived = !out.escaped && !classify_loss(out.e_max, plan.loss_depth, spec.loss_threshold);
  if (!out.escaped) out.e_final = apply_heating(out.e_final, spec.heating, out.wall_time, &rng);

  if (spec.record_trace && !out.escaped) {
    RecoveryOptions ro;
    ro.shot_noise_seed = rng();
    const double w = spec.model == TransportModel::full ? plan.load_well.omega_z
                                                        : spec.ramp.omega_target;
    out.trace = simulate_recovery(out.e_final, plan.laser, w, plan.species, spec.trace_duration,
                                  spec.trace_bin, ro);
  }
  return out;
}

inline SequenceOutcome run_sequence(const AxialBasis& basis, const TrapGeometry& geometry,
                                    const SequenceSpec& spec,
                                    const IonSpecies& species = IonSpecies::calcium40()) {
  return run_trial(plan_sequence(basis, geometry, spec, species), 0);
}

/// Runs trials [0, n) on `jobs` threads; results are ordered by trial index.
inline std::vector<SequenceOutcome> run_trials(const SequencePlan& plan, std::size_t n,
                                               unsigned jobs = 1) {
  std::vector<SequenceOutcome> out(n);
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = run_trial(plan, i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (unsigned j = 0; j < jobs; ++j) {
    pool.emplace_back([&, j] {
      try {
        for (std::size_t i = j; i < n; i += jobs) out[i] = run_trial(plan, i);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

struct SuccessRecord {
  std::vector<long long> n_list;  // successful transports before each loss
  std::vector<bool> censored;     // true where the run ended without a loss
  double tau = 0.0;
  double background_loss = 0.0;   // per-attempt probability

  std::size_t trials() const { return n_list.size(); }

  void validate() const {
    if (n_list.empty()) throw InvalidInput("success record needs at least one run");
    if (!censored.empty() && censored.size() != n_list.size())
      throw InvalidInput("censoring flags do not match the run count");
    for (auto n : n_list)
      if (n < 0) throw InvalidInput("success counts must be non-negative");
    if (!(background_loss >= 0) || !(background_loss < 1))
      throw InvalidInput("background loss must lie in [0, 1)");
  }

  bool is_censored(std::size_t i) const { return !censored.empty() && censored[i]; }
};

struct SuccessEstimate {
  double p_tilde = 0.0;
  double p_net = 0.0;
  double lo = 0.0, hi = 1.0;          // 68 % interval on p_tilde
  double p_net_lo = 0.0, p_net_hi = 1.0;
  long long successes = 0;
  long long losses = 0;
  bool degenerate = false;            // no successes at all
  bool lower_bound_only = false;      // no losses observed
};

/// Maximum-likelihood geometric fit with right-censored runs, profile
/// likelihood interval (2 delta log L <= 1) and removal of a background loss
/// channel p_tilde = p_net (1 - b).
inline SuccessEstimate estimate_success(const SuccessRecord& rec) {
  rec.validate();
  SuccessEstimate e;
  for (std::size_t i = 0; i < rec.n_list.size(); ++i) {
    e.successes += rec.n_list[i];
    if (!rec.is_censored(i)) ++e.losses;
  }
  const auto s = static_cast<double>(e.successes);
  const auto l = static_cast<double>(e.losses);
  auto loglik = [&](double p) {
    double v = 0.0;
    if (s > 0) v += s * std::log(p);
    if (l > 0) v += l * std::log1p(-p);
    return v;
  };
  if (e.successes == 0 && e.losses == 0) throw EstimationError("record contains no attempts");
  if (e.successes == 0) {
    e.degenerate = true;
    e.p_tilde = 0.0;
    e.lo = 0.0;
    e.hi = -std::expm1(-0.5 / l);
  } else if (e.losses == 0) {
    e.lower_bound_only = true;
    e.p_tilde = 1.0;
    e.lo = std::exp(-0.5 / s);
    e.hi = 1.0;
  } else {
    e.p_tilde = s / (s + l);
    const double peak = loglik(e.p_tilde);
    auto f = [&](double p) { return 2.0 * (peak - loglik(p)) - 1.0; };
    auto tol = [](double a, double b) { return std::abs(b - a) < 1e-14; };
    std::uintmax_t it = 200;
    const double tiny = 1e-300;
    auto left = boost::math::tools::toms748_solve(f, tiny, e.p_tilde, tol, it);
    it = 200;
    auto right = boost::math::tools::toms748_solve(f, e.p_tilde, 1.0 - 1e-16, tol, it);
    e.lo = 0.5 * (left.first + left.second);
    e.hi = 0.5 * (right.first + right.second);
  }
  const double keep = 1.0 - rec.background_loss;
  e.p_net = std::min(1.0, e.p_tilde / keep);
  e.p_net_lo = std::min(1.0, e.lo / keep);
  e.p_net_hi = std::min(1.0, e.hi / keep);
  return e;
}

/// Splits a sequence of attempts into runs ending at each loss; the trailing
/// run is censored. A background loss with probability b is drawn per attempt.
inline SuccessRecord record_from_attempts(const std::vector<SequenceOutcome>& attempts,
                                          double background_loss, std::uint64_t seed,
                                          double tau = 0.0) {
  SuccessRecord rec;
  rec.tau = tau;
  rec.background_loss = background_loss;
  auto rng = detail::trial_rng(seed, std::numeric_limits<std::uint64_t>::max());
  long long run = 0;
  for (const auto& a : attempts) {
    const bool background = background_loss > 0 && detail::unit_uniform(rng) < background_loss;
    if (a.survived && !background) {
      ++run;
    } else {
      rec.n_list.push_back(run);
      rec.censored.push_back(false);
      run = 0;
    }
  }
  if (run > 0 || rec.n_list.empty()) {
    rec.n_list.push_back(run);
    rec.censored.push_back(true);
  }
  return rec;
}

struct TauSweepRow {
  double tau = 0.0;
  SuccessEstimate success;
  double e_final = 0.0;        // eV, mean over trials that stayed in the model region
  double e_max = 0.0;          // eV
  double max_excursion = 0.0;  // m
  std::size_t survived = 0;
  std::size_t trials = 0;
};

namespace detail {
inline void accumulate(const std::vector<SequenceOutcome>& outs, TauSweepRow& row) {
  std::size_t kept = 0;
  for (const auto& o : outs) {
    row.survived += o.survived ? 1 : 0;
    if (o.escaped) continue;
    ++kept;
    row.e_final += o.e_final;
    row.e_max += o.e_max;
    row.max_excursion += o.max_excursion;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (kept == 0) {
    row.e_final = row.e_max = row.max_excursion = nan;
  } else {
    row.e_final /= static_cast<double>(kept);
    row.e_max /= static_cast<double>(kept);
    row.max_excursion /= static_cast<double>(kept);
  }
  row.trials = outs.size();
}
}  // namespace detail

inline std::vector<TauSweepRow> sweep_tau(const AxialBasis& basis, const TrapGeometry& geometry,
                                          const SequenceSpec& base, const std::vector<double>& taus,
                                          std::size_t trials, double background_loss,
                                          unsigned jobs = 1,
                                          const IonSpecies& species = IonSpecies::calcium40()) {
  if (trials < 1) throw InvalidInput("sweep needs at least one trial per point");
  std::vector<TauSweepRow> rows;
  for (double tau : taus) {
    if (!(tau > 0)) throw InvalidInput("tau values must be positive");
    SequenceSpec spec = base;
    spec.ramp = RampSpec::from_tau(tau, base.ramp.sigma, base.ramp.omega_target,
                                   base.ramp.distance, base.ramp.dt_update);
    const auto plan = plan_sequence(basis, geometry, spec, species);
    const auto outs = run_trials(plan, trials, jobs);
    TauSweepRow row;
    row.tau = tau;
    detail::accumulate(outs, row);
    row.success = estimate_success(record_from_attempts(outs, background_loss, spec.seed, tau));
    rows.push_back(row);
  }
  return rows;
}

struct SigmaSweepRow {
  double sigma = 0.0;
  double e_final = 0.0;  // eV, mean over surviving trials; NaN if none survived
  double e_max = 0.0;    // eV
};

inline std::vector<SigmaSweepRow> sweep_sigma(const AxialBasis& basis,
                                              const TrapGeometry& geometry,
                                              const SequenceSpec& base,
                                              const std::vector<double>& sigmas, double tau,
                                              std::size_t trials = 1, unsigned jobs = 1,
                                              const IonSpecies& species = IonSpecies::calcium40()) {
  if (!(tau > 0)) throw InvalidInput("tau must be positive");
  std::vector<SigmaSweepRow> rows;
  for (double sigma : sigmas) {
    if (!(sigma > 0)) throw InvalidInput("sigma values must be positive");
    SequenceSpec spec = base;
    spec.ramp = RampSpec::from_tau(tau, sigma, base.ramp.omega_target, base.ramp.distance,
                                   base.ramp.dt_update);
    auto outs = run_trials(plan_sequence(basis, geometry, spec, species), trials, jobs);
    // a lost ion's energy is measured against a well it no longer occupies
    std::erase_if(outs, [](const SequenceOutcome& o) { return !o.survived; });
    TauSweepRow acc;
    detail::accumulate(outs, acc);
    rows.push_back({sigma, acc.e_final, acc.e_max});
  }
  return rows;
}

/// Sigma with the lowest final energy among rows with surviving trials.
inline double argmin_sigma(const std::vector<SigmaSweepRow>& rows) {
  const SigmaSweepRow* best = nullptr;
  for (const auto& r : rows) {
    if (std::isnan(r.e_final)) continue;
    if (!best || r.e_final < best->e_final) best = &r;
  }
  if (!best) throw EstimationError("no sigma value kept the ion");
  return best->sigma;
}

}  // namespace pcbtrap
