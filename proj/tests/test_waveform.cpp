#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "pcbtrap/waveform.hpp"

using namespace pcbtrap;

namespace {

const TrapGeometry& geometry() {
  static const auto g = TrapGeometry::pcb_default();
  return g;
}

const AxialBasis& basis() {
  static const auto b = analytic_basis(geometry(), 1e-3, Grid::uniform(-14e-3, 7e-3, 4201));
  return b;
}

double closed_form_ramp(double d, double T, double sigma, double t) {
  const double s = t <= T / 2 ? t : T - t;
  return d / 2 * (1 + std::erf(sigma * (4 * s / T - 1)) / std::erf(sigma));
}

// Curvature and slope of the superposed surrogate evaluated without the basis tables.
std::pair<double, double> direct_slope_curvature(const std::vector<double>& u, double z) {
  double s = 0, c = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const auto& seg = geometry().segments[i];
    const ArctanElectrode el{seg.center, seg.width, 1e-3};
    s += u[i] * el.slope(z);
    c += u[i] * el.curvature(z);
  }
  return {s, c};
}

}  // namespace

class RampShape : public ::testing::TestWithParam<double> {};

TEST_P(RampShape, EndpointsSymmetryAndMonotonicity) {
  const double sigma = GetParam();
  const auto r = RampSpec::from_tau(4.0, sigma);
  EXPECT_NEAR(r.duration, 20e-6, 1e-15);
  EXPECT_NEAR(ramp_position(r, 0.0), 0.0, 1e-15);
  EXPECT_NEAR(ramp_position(r, r.duration / 2), r.distance, 1e-15);
  EXPECT_NEAR(ramp_position(r, r.duration), 0.0, 1e-15);
  double prev = -1;
  for (int k = 0; k <= 200; ++k) {
    const double t = r.duration * k / 200.0;
    const double z = ramp_position(r, t);
    EXPECT_NEAR(z, closed_form_ramp(r.distance, r.duration, sigma, t), 1e-15);
    EXPECT_NEAR(z, ramp_position(r, r.duration - t), 1e-15);
    if (k <= 100) {
      EXPECT_GE(z, prev);
      prev = z;
    }
  }
}

TEST_P(RampShape, VelocityMatchesFiniteDifference) {
  const auto r = RampSpec::from_tau(5.0, GetParam());
  const double h = 1e-12;
  for (double f : {0.05, 0.2, 0.25, 0.4, 0.6, 0.8, 0.95}) {
    const double t = f * r.duration;
    const double fd = (ramp_position(r, t + h) - ramp_position(r, t - h)) / (2 * h);
    EXPECT_NEAR(ramp_velocity(r, t), fd, 1e-5 * std::abs(fd) + 1e-3);
  }
}

INSTANTIATE_TEST_SUITE_P(Sigmas, RampShape, ::testing::Values(1.0, 2.0, 2.3, 4.0));

TEST(Ramp, RejectsTimesOutsideTheRamp) {
  const auto r = RampSpec::from_tau(4.0);
  EXPECT_THROW(ramp_position(r, -1e-9), InvalidInput);
  EXPECT_THROW(ramp_position(r, r.duration * 1.001), InvalidInput);
  auto bad = r;
  bad.sigma = 0;
  EXPECT_THROW(bad.validate(), InvalidInput);
}

TEST(Ramp, ZeroOrderHoldUsesLastUpdate) {
  const auto r = RampSpec::from_tau(4.0);
  EXPECT_EQ(r.update_steps(), 20u);
  EXPECT_DOUBLE_EQ(held_ramp_position(r, 3.7e-6), ramp_position(r, 3e-6));
  EXPECT_DOUBLE_EQ(held_ramp_position(r, 3e-6), ramp_position(r, 3e-6));
  EXPECT_DOUBLE_EQ(held_ramp_position(r, 25e-6), 0.0);
}

TEST(Solver, MeetsFrequencyAndPositionAcrossTheZone) {
  const SolverConfig cfg;
  const auto sp = IonSpecies::calcium40();
  for (double z0 : {0.0, 0.25e-3, 0.9e-3, 1.5e-3, 2e-3}) {
    const WellTarget target{z0, kTwoPi * 200e3};
    const auto res = solve_voltages(basis(), target, cfg, sp);
    ASSERT_EQ(res.voltages.size(), 15u);
    for (double u : res.voltages) {
      EXPECT_LE(u, cfg.v_max);
      EXPECT_GE(u, cfg.v_min);
    }
    EXPECT_NEAR(res.achieved_omega / target.omega, 1.0, 0.01);
    EXPECT_NEAR(res.achieved_z_min, z0, 1e-6);
    const auto [slope, curv] = direct_slope_curvature(res.voltages, z0);
    EXPECT_NEAR(std::sqrt(sp.charge * curv / sp.mass) / target.omega, 1.0, 0.01);
    EXPECT_LT(std::abs(slope) / curv, 1e-6);
  }
}

TEST(Solver, SolutionIsNotImprovedByRandomPerturbations) {
  const SolverConfig cfg;
  const auto sp = IonSpecies::calcium40();
  const WellTarget target{0.6e-3, kTwoPi * 200e3};
  const auto res = solve_voltages(basis(), target, cfg, sp);
  const double best = solver_objective(basis(), target, cfg, sp, res.voltages);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double scale : {1e-1, 1e-2, 1e-3, 1e-4}) {
    for (int trial = 0; trial < 50; ++trial) {
      auto u = res.voltages;
      for (auto& v : u) v += scale * n(rng);
      EXPECT_GE(solver_objective(basis(), target, cfg, sp, u), best * (1 - 1e-9));
    }
  }
  // coordinate grid search around the solution
  for (std::size_t i = 0; i < 15; ++i) {
    for (int k = -10; k <= 10; ++k) {
      auto u = res.voltages;
      u[i] += 1e-3 * k;
      EXPECT_GE(solver_objective(basis(), target, cfg, sp, u), best * (1 - 1e-9));
    }
  }
}

TEST(Solver, UnreachableFrequencyIsInfeasible) {
  const SolverConfig cfg;
  const WellTarget target{0.0, kTwoPi * 3e6};
  try {
    solve_voltages(basis(), target, cfg, IonSpecies::calcium40());
    FAIL() << "expected InfeasibleError";
  } catch (const InfeasibleError& e) {
    EXPECT_LT(e.achieved_omega, target.omega * 0.99);
  }
}

TEST(Solver, RejectsTargetsOffTheGrid) {
  EXPECT_THROW(solve_voltages(basis(), {20e-3, kTwoPi * 200e3}, SolverConfig{},
                              IonSpecies::calcium40()),
               InvalidInput);
}

TEST(Waveform, RoundTripRowsMirrorTheOutboundLeg) {
  const auto r = RampSpec::from_tau(4.0);
  const auto w = generate_waveform(basis(), r, SolverConfig{}, IonSpecies::calcium40());
  ASSERT_EQ(w.rows(), 21u);
  EXPECT_EQ(w.electrodes(), 15u);
  for (std::size_t k = 0; k <= 20; ++k) EXPECT_EQ(w.steps[k], w.steps[20 - k]);
  const auto half = solve_voltages(basis(), {2e-3, r.omega_target}, SolverConfig{},
                                   IonSpecies::calcium40());
  for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(w.steps[10][i], half.voltages[i], 1e-12);
}

TEST(Waveform, QuantizationSnapsToCodes) {
  const auto r = RampSpec::from_tau(4.0);
  const auto raw = generate_waveform(basis(), r, SolverConfig{}, IonSpecies::calcium40());
  const DacSpec dac;
  const auto q = quantize(raw, dac);
  EXPECT_TRUE(q.quantized);
  EXPECT_EQ(q.dac_bits, 16);
  EXPECT_FALSE(q.saturated);
  const double lsb = 20.0 / 65536.0;
  for (std::size_t k = 0; k < q.rows(); ++k) {
    for (std::size_t i = 0; i < 15; ++i) {
      const double code = q.steps[k][i] / lsb;
      EXPECT_NEAR(code, std::round(code), 1e-6);
      EXPECT_LE(std::abs(q.steps[k][i] - raw.steps[k][i]), 0.5 * lsb + 1e-12);
    }
  }
}

TEST(Waveform, QuantizationSaturates) {
  VoltageWaveform w;
  w.steps = {{12.0, -11.0, 10.0}};
  const auto q = quantize(w, DacSpec{});
  EXPECT_TRUE(q.saturated);
  EXPECT_LE(q.steps[0][0], 10.0);
  EXPECT_GE(q.steps[0][1], -10.0);
  EXPECT_LE(q.steps[0][2], 10.0);
}

TEST(Waveform, MorphAndConcatenate) {
  const std::vector<double> a{0.0, 1.0}, b{2.0, -1.0};
  const auto m = morph(a, b, 4, 1e-6);
  ASSERT_EQ(m.rows(), 5u);
  EXPECT_EQ(m.steps.front(), a);
  EXPECT_EQ(m.steps.back(), b);
  EXPECT_DOUBLE_EQ(m.steps[2][0], 1.0);
  EXPECT_DOUBLE_EQ(m.steps[1][1], 0.5);
  const auto back = morph(b, a, 3, 1e-6);
  const std::vector<VoltageWaveform> parts{m, back};
  const auto c = concatenate(parts);
  EXPECT_EQ(c.rows(), 8u);
  EXPECT_EQ(c.steps[4], b);
  EXPECT_EQ(c.steps.back(), a);
  const std::vector<VoltageWaveform> mismatched{m, morph(a, b, 2, 2e-6)};
  EXPECT_THROW(concatenate(mismatched), InvalidInput);
}

TEST(Waveform, LowpassStepResponse) {
  VoltageWaveform w;
  w.dt = 1e-6;
  w.steps = {{0.0}, {1.0}, {1.0}, {1.0}, {1.0}, {1.0}};
  const double fc = 1.0 / (kTwoPi * 1e-6);  // RC = 1 us
  const auto f = lowpass(w, fc, 100);
  EXPECT_TRUE(f.filtered);
  EXPECT_NEAR(f.dt, 1e-8, 1e-20);
  // step applied at t = 1 us; one RC later the output is 1 - 1/e
  EXPECT_NEAR(f.steps[200][0], 1 - std::exp(-1.0), 1e-12);
  const auto sharp = lowpass(w, std::numeric_limits<double>::infinity(), 1);
  for (std::size_t k = 1; k < sharp.rows(); ++k) EXPECT_DOUBLE_EQ(sharp.steps[k][0], w.steps[k - 1][0]);
  EXPECT_THROW(lowpass(w, 0.0), InvalidInput);
}
