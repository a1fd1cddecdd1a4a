#include <cmath>
#include <complex>
#include <vector>

#include <gtest/gtest.h>

#include "pcbtrap/dynamics.hpp"

using namespace pcbtrap;

namespace {

const double kDt = 20e-9;

// Exact propagation of the sampled-and-held harmonic drive: within each hold
// interval the displacement from the fixed well centre rotates in phase space.
struct HeldOracle {
  double e_final_ev;
  double e_max_ev;
  double max_excursion;
};

HeldOracle exact_held(const RampSpec& r, const IonSpecies& sp) {
  const double w = r.omega_target;
  const std::size_t n = r.update_steps();
  double z = 0, v = 0;
  double e_max = 0, excursion = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double z0 = ramp_position(r, update_time(r, k));
    // sample densely inside the interval for the maxima
    for (int s = 0; s <= 50; ++s) {
      const double tau = r.dt_update * s / 50.0;
      const double x = (z - z0) * std::cos(w * tau) + v / w * std::sin(w * tau);
      const double u = -(z - z0) * w * std::sin(w * tau) + v * std::cos(w * tau);
      e_max = std::max(e_max, 0.5 * sp.mass * (u * u + w * w * x * x));
      excursion = std::max(excursion, std::abs(x));
    }
    const double x = z - z0;
    const double c = std::cos(w * r.dt_update), s = std::sin(w * r.dt_update);
    const double xn = x * c + v / w * s;
    v = -x * w * s + v * c;
    z = z0 + xn;
  }
  const double z_end = ramp_position(r, r.duration);
  const double e = 0.5 * sp.mass * (v * v + w * w * (z - z_end) * (z - z_end));
  return {to_ev(e), to_ev(std::max(e_max, e)), excursion};
}

}  // namespace

TEST(Harmonic, ContinuousDriveMatchesFourierOracle) {
  const auto sp = IonSpecies::calcium40();
  int checked = 0;
  for (double sigma : {1.5, 2.0, 3.0}) {
    for (double tau : {2.5, 3.0, 3.2, 3.5, 4.5}) {
      const auto r = RampSpec::from_tau(tau, sigma);
      const auto tr = integrate_harmonic(r, sp, {}, kDt, false);
      const double e_ode = summarize(tr).e_final;
      const double e_fourier = fourier_energy_oracle(r, sp);
      EXPECT_NEAR(e_ode, e_fourier, 0.01 * e_fourier + 1e-6)
          << "sigma=" << sigma << " tau=" << tau;
      ++checked;
    }
  }
  EXPECT_GE(checked, 10);
}

TEST(Harmonic, HeldDriveMatchesExactPropagation) {
  const auto sp = IonSpecies::calcium40();
  for (double tau : {3.2, 4.0, 5.5}) {
    const auto r = RampSpec::from_tau(tau);
    const auto got = summarize(integrate_harmonic(r, sp, {}, kDt, true));
    const auto want = exact_held(r, sp);
    EXPECT_NEAR(got.e_final, want.e_final_ev, 1e-3 * want.e_max_ev) << tau;
    EXPECT_NEAR(got.e_max, want.e_max_ev, 2e-3 * want.e_max_ev) << tau;
    EXPECT_NEAR(got.max_excursion, want.max_excursion, 2e-3 * want.max_excursion) << tau;
  }
}

TEST(Harmonic, FrozenReferenceValues) {
  // reference integration of the held drive at sigma = 2, 200 kHz, 2 mm
  const auto sp = IonSpecies::calcium40();
  const auto a = integrate_harmonic(RampSpec::from_tau(3.2), sp, {}, kDt, true);
  const auto sa = summarize(a);
  EXPECT_NEAR(sa.e_final * 1e3, 170.98, 0.5);
  EXPECT_NEAR(sa.e_max * 1e3, 360.24, 1.0);
  EXPECT_NEAR(max_potential_energy(a, sp) * 1e3, 252.19, 1.0);
  EXPECT_NEAR(sa.max_excursion * 1e6, 877.75, 2.0);

  const auto b = integrate_harmonic(RampSpec::from_tau(4.0), sp, {}, kDt, true);
  const auto sb = summarize(b);
  EXPECT_LT(sb.e_final * 1e3, 0.5);
  EXPECT_NEAR(sb.e_max * 1e3, 76.855, 0.3);
  EXPECT_NEAR(max_potential_energy(b, sp) * 1e3, 38.888, 0.5);
  EXPECT_NEAR(sb.max_excursion * 1e6, 344.68, 1.0);
}

TEST(Harmonic, FastRampsExciteMoreThanSlowOnes) {
  const auto sp = IonSpecies::calcium40();
  const double fast = summarize(integrate_harmonic(RampSpec::from_tau(2.5), sp, {}, kDt)).e_max;
  const double slow = summarize(integrate_harmonic(RampSpec::from_tau(8.0), sp, {}, kDt)).e_max;
  EXPECT_GT(fast, 5 * slow);
}

TEST(Harmonic, RejectsCoarseSteps) {
  EXPECT_THROW(integrate_harmonic(RampSpec::from_tau(4.0), IonSpecies::calcium40(), {}, 1e-7),
               InvalidInput);
  EXPECT_THROW(integrate_harmonic(RampSpec::from_tau(4.0), IonSpecies::calcium40(), {}, -1.0),
               InvalidInput);
}

TEST(Harmonic, RecordStrideKeepsEndpoints) {
  const auto r = RampSpec::from_tau(4.0);
  IntegrationOptions opt;
  opt.record_stride = 7;
  const auto tr = integrate_harmonic(r, IonSpecies::calcium40(), {}, kDt, true, opt);
  EXPECT_EQ(tr.samples.size(), tr.energy.size());
  EXPECT_DOUBLE_EQ(tr.samples.front().t, 0.0);
  EXPECT_NEAR(tr.samples.back().t, r.duration, 1e-15);
}

TEST(FourierOracle, StaticWellGivesZero) {
  const auto sp = IonSpecies::calcium40();
  EXPECT_EQ(fourier_energy([](double) { return 0.0; }, 1e-5, kTwoPi * 2e5, sp), 0.0);
  // a constant-velocity drag stopped after whole periods leaves no energy
  const double w = kTwoPi * 2e5;
  const double e = fourier_energy([](double) { return 10.0; }, 3 * kTwoPi / w, w, sp);
  EXPECT_LT(e, 1e-18);
}

TEST(FullModel, StaticWellConservesEnergy) {
  const auto basis = analytic_basis(TrapGeometry::pcb_default(), 1e-3,
                                    Grid::uniform(-14e-3, 7e-3, 4201));
  const auto sp = IonSpecies::calcium40();
  const auto sol = solve_voltages(basis, {0.0, kTwoPi * 200e3}, SolverConfig{}, sp);
  VoltageWaveform w;
  w.steps = {sol.voltages};
  FullIntegrationOptions opt;
  opt.extra_time = 200e-6;
  const auto tr = integrate_full(basis, w, sp, {sol.achieved_z_min + 30e-6, 0.0, 0.0}, kDt, opt);
  ASSERT_FALSE(tr.lost);
  const double e0 = tr.energy.front();
  double worst = 0;
  for (double e : tr.energy) worst = std::max(worst, std::abs(e - e0));
  EXPECT_LT(worst / e0, 1e-3);
  // secular period check: the ion returns near its start after 40 periods
  EXPECT_NEAR(tr.samples.back().z, sol.achieved_z_min + 30e-6, 1e-6);
}

TEST(FullModel, AgreesWithHarmonicForSlowRamps) {
  const auto basis = analytic_basis(TrapGeometry::pcb_default(), 1e-3,
                                    Grid::uniform(-14e-3, 7e-3, 4201));
  const auto sp = IonSpecies::calcium40();
  const auto r = RampSpec::from_tau(4.0);
  const auto w = generate_waveform(basis, r, SolverConfig{}, sp);
  const auto full = summarize(integrate_full(basis, w, sp, {ramp_position(r, 0.0), 0, 0}, kDt));
  const auto harm = summarize(integrate_harmonic(r, sp, {}, kDt, true));
  EXPECT_FALSE(full.lost);
  EXPECT_NEAR(full.e_max, harm.e_max, 0.10 * harm.e_max);
  EXPECT_NEAR(full.max_excursion, harm.max_excursion, 0.10 * harm.max_excursion);
}

TEST(FullModel, LeavingTheGridIsLoss) {
  const auto basis = analytic_basis(TrapGeometry::pcb_default(), 1e-3,
                                    Grid::uniform(-14e-3, 7e-3, 4201));
  VoltageWaveform w;
  w.steps = {std::vector<double>(15, 0.0)};
  FullIntegrationOptions opt;
  opt.extra_time = 10e-6;
  const auto tr = integrate_full(basis, w, IonSpecies::calcium40(), {6.9e-3, 1e3, 0.0}, kDt, opt);
  EXPECT_TRUE(tr.lost);
  ASSERT_TRUE(tr.loss_time.has_value());
  EXPECT_NEAR(*tr.loss_time, 0.1e-6, 0.05e-6);
}

TEST(LossProxy, ThresholdFraction) {
  EXPECT_FALSE(classify_loss(0.15, 0.5, 0.3));
  EXPECT_TRUE(classify_loss(0.16, 0.5, 0.3));
  EXPECT_THROW(classify_loss(0.1, 0.5, 0.0), InvalidInput);
  EXPECT_THROW(classify_loss(0.1, 0.5, 1.5), InvalidInput);
  Trajectory tr;
  tr.samples = {{}};
  tr.energy = {0.0};
  tr.lost = true;
  EXPECT_TRUE(classify_loss(tr, 0.5, 0.3));
}

namespace {

// Mean energy over the first and the last secular period of a trajectory.
std::pair<double, double> period_means(const Trajectory& tr, std::size_t per_period) {
  double first = 0, last = 0;
  const std::size_t n = tr.energy.size();
  for (std::size_t i = 0; i < per_period; ++i) {
    first += tr.energy[i];
    last += tr.energy[n - 1 - i];
  }
  return {first / per_period, last / per_period};
}

}  // namespace

TEST(Invariants, StaticHarmonicWellHasNoSecularDrift) {
  const auto sp = IonSpecies::calcium40();
  HarmonicDrive d;
  d.omega = kTwoPi * 200e3;
  d.position = [](double) { return 0.0; };
  d.end_time = 100 * kTwoPi / d.omega;
  const double h = kTwoPi / d.omega / 200;
  const auto tr = integrate_harmonic(d, sp, {50e-6, 0, 0}, h);
  const auto [first, last] = period_means(tr, 200);
  EXPECT_LT(std::abs(last - first) / first, 1e-6);
}

TEST(Invariants, StaticFullWellHasNoSecularDrift) {
  const auto basis = analytic_basis(TrapGeometry::pcb_default(), 1e-3,
                                    Grid::uniform(-14e-3, 7e-3, 4201));
  const auto sp = IonSpecies::calcium40();
  const auto sol = solve_voltages(basis, {0.0, kTwoPi * 200e3}, SolverConfig{}, sp);
  const double period = kTwoPi / sol.achieved_omega;
  VoltageWaveform w;
  w.steps = {sol.voltages};
  FullIntegrationOptions opt;
  opt.extra_time = 100 * period;
  const auto tr = integrate_full(basis, w, sp, {sol.achieved_z_min + 30e-6, 0, 0}, period / 200, opt);
  const auto [first, last] = period_means(tr, 200);
  EXPECT_LT(std::abs(last - first) / first, 1e-6);
}

TEST(Invariants, HalvingTheStepBarelyChangesTheResult) {
  const auto sp = IonSpecies::calcium40();
  for (double tau : {3.2, 4.0, 6.0, 20.0}) {
    const auto r = RampSpec::from_tau(tau);
    const auto a = summarize(integrate_harmonic(r, sp, {}, kDt));
    const auto b = summarize(integrate_harmonic(r, sp, {}, kDt / 2));
    EXPECT_LE(std::abs(a.e_final - b.e_final), 1e-3 * std::max(a.e_final, 1e-3 * a.e_max)) << tau;
  }
}

TEST(Invariants, TimeReversedDriveReturnsTheIon) {
  const auto sp = IonSpecies::calcium40();
  for (double tau : {2.7, 3.2, 5.0}) {
    const auto r = RampSpec::from_tau(tau);
    const auto fwd = integrate_harmonic(r, sp, {}, kDt / 4, false);
    const auto end = fwd.final_state();
    HarmonicDrive back;
    back.omega = r.omega_target;
    back.end_time = r.duration;
    back.position = [r](double t) { return ramp_position(r, std::clamp(r.duration - t, 0.0, r.duration)); };
    const auto rev = integrate_harmonic(back, sp, {end.z, -end.v, 0.0}, kDt / 4);
    const auto s = rev.final_state();
    EXPECT_NEAR(s.z, 0.0, 1e-9) << tau;
    EXPECT_NEAR(s.v, 0.0, 1e-3) << tau;
  }
}

TEST(Invariants, HoldingLowPassesTheDrive) {
  // a held ramp is the continuous ramp smoothed by a box of one update
  // interval, which attenuates the drive at the secular frequency
  const auto sp = IonSpecies::calcium40();
  int compared = 0;
  for (double sigma : {1.5, 2.0, 3.0}) {
    for (double tau : {2.5, 3.0, 3.2, 5.0}) {
      const auto r = RampSpec::from_tau(tau, sigma);
      const double cont = summarize(integrate_harmonic(r, sp, {}, kDt, false)).e_final;
      if (cont < 1e-4) continue;
      const double held = summarize(integrate_harmonic(r, sp, {}, kDt, true)).e_final;
      EXPECT_LT(held, cont) << sigma << " " << tau;
      EXPECT_GT(held, 0.6 * cont) << sigma << " " << tau;
      ++compared;
    }
  }
  EXPECT_GE(compared, 8);
}

TEST(Harmonic, SuddenDragOscillatesAboutTheMovingMinimum) {
  const auto sp = IonSpecies::calcium40();
  const double w = kTwoPi * 200e3, u = 5.0;
  HarmonicDrive d;
  d.omega = w;
  d.position = [u](double t) { return u * t; };
  d.end_time = 10 * kTwoPi / w;
  const auto tr = integrate_harmonic(d, sp, {}, kDt);
  const auto s = summarize(tr);
  EXPECT_NEAR(s.max_excursion, u / w, 1e-3 * u / w);
  // energy in the co-moving frame is constant at m u^2 / 2
  for (std::size_t i = 0; i < tr.samples.size(); i += 50) {
    const auto& st = tr.samples[i];
    const double x = st.z - tr.well_position[i];
    const double e = 0.5 * sp.mass * ((st.v - u) * (st.v - u) + w * w * x * x);
    EXPECT_NEAR(e, 0.5 * sp.mass * u * u, 1e-3 * 0.5 * sp.mass * u * u);
  }
}
