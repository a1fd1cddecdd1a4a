#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "pcbtrap/trap_model.hpp"

using namespace pcbtrap;

namespace {

const double kE = 1.602176634e-19;
const double kMass40 = 40.0 * 1.66053906660e-27;

AxialBasis default_basis() {
  return analytic_basis(TrapGeometry::pcb_default(), 1e-3, Grid::uniform(-14e-3, 7e-3, 4201));
}

// Dimensionless chain energy sum u^2/2 + sum 1/|u_i - u_j|.
double chain_energy(const std::vector<double>& u) {
  double e = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    e += 0.5 * u[i] * u[i];
    for (std::size_t j = i + 1; j < u.size(); ++j) e += 1.0 / std::abs(u[i] - u[j]);
  }
  return e;
}

// Pattern search with shrinking step; slow but assumption-free.
std::vector<double> brute_force_chain(std::size_t n) {
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = static_cast<double>(i) - 0.5 * static_cast<double>(n - 1);
  double step = 0.5;
  double e = chain_energy(u);
  while (step > 1e-12) {
    bool improved = false;
    for (std::size_t i = 0; i < n; ++i) {
      for (double dir : {1.0, -1.0}) {
        auto trial = u;
        trial[i] += dir * step;
        const double et = chain_energy(trial);
        if (et < e) {
          u = trial;
          e = et;
          improved = true;
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return u;
}

}  // namespace

TEST(Geometry, DefaultLayout) {
  const auto g = TrapGeometry::pcb_default();
  ASSERT_EQ(g.size(), 15u);
  EXPECT_NO_THROW(g.validate());
  EXPECT_NEAR(g.segment(10).center, 0.0, 1e-15);
  EXPECT_NEAR(g.segment(13).center, 1.86e-3, 1e-12);
  EXPECT_DOUBLE_EQ(g.segment(1).width, 2e-3);
  EXPECT_DOUBLE_EQ(g.segment(4).width, 2e-3);
  EXPECT_DOUBLE_EQ(g.segment(5).width, 0.5e-3);
  EXPECT_EQ(g.segment(4).zone, Zone::taper);
  EXPECT_DOUBLE_EQ(g.r0(), 1e-3);
  EXPECT_THROW(g.segment(16), InvalidInput);
}

TEST(Geometry, RejectsUnorderedCenters) {
  auto g = TrapGeometry::pcb_default();
  std::swap(g.segments[3], g.segments[4]);
  EXPECT_THROW(g.validate(), InvalidInput);
}

TEST(Basis, AnalyticDerivativesMatchFiniteDifferences) {
  const ArctanElectrode el{0.3e-3, 0.5e-3, 1e-3};
  const double h = 1e-7;
  for (double z : {-2e-3, -0.1e-3, 0.0, 0.55e-3, 3e-3}) {
    const double d1 = (el.value(z + h) - el.value(z - h)) / (2 * h);
    const double d2 = (el.slope(z + h) - el.slope(z - h)) / (2 * h);
    EXPECT_NEAR(el.slope(z), d1, 1e-6 * std::abs(d1) + 1e-6);
    EXPECT_NEAR(el.curvature(z), d2, 1e-5 * std::abs(d2) + 1e-3);
  }
}

TEST(Basis, ImportedTablesReproduceAnalyticBasis) {
  const auto a = default_basis();
  const auto b = AxialBasis::from_samples(a.grid(), a.phi());
  EXPECT_EQ(b.provenance(), BasisProvenance::imported);
  for (std::size_t e : {4u, 9u, 12u}) {
    for (double z : {-1e-3, 0.0, 0.31e-3, 1.5e-3}) {
      EXPECT_NEAR(b.value(e, z), a.value(e, z), 1e-9);
      EXPECT_NEAR(b.slope(e, z), a.slope(e, z), 1e-3 * std::abs(a.slope(e, z)) + 1e-3);
      EXPECT_NEAR(b.curvature(e, z), a.curvature(e, z), 1e-2 * std::abs(a.curvature(e, z)) + 1);
    }
  }
}

TEST(Potential, SuperpositionIsLinear) {
  const auto basis = default_basis();
  std::vector<double> u1(15, 0.0), u2(15, 0.0), sum(15, 0.0);
  u1[6] = 3.0;
  u2[12] = -2.0;
  u2[9] = 1.5;
  for (int i = 0; i < 15; ++i) sum[i] = u1[i] + u2[i];
  const auto p1 = superpose(basis, u1), p2 = superpose(basis, u2), ps = superpose(basis, sum);
  for (double z : {-1.3e-3, 0.0, 0.77e-3}) {
    EXPECT_NEAR(ps.value(z), p1.value(z) + p2.value(z), 1e-12);
    EXPECT_NEAR(ps.slope(z), p1.slope(z) + p2.slope(z), 1e-9);
  }
  EXPECT_THROW(superpose(basis, std::vector<double>(14, 0.0)), InvalidInput);
}

TEST(Potential, StrayFieldAddsLinearTerm) {
  const auto basis = default_basis();
  std::vector<double> u(15, 0.0);
  const auto p = superpose(basis, u, 50.0);
  EXPECT_NEAR(p.slope(0.2e-3), -50.0, 1e-9);
}

TEST(Well, QuadraticTableGivesExactFrequency) {
  // phi = a (z - z0)^2 on an imported table
  const double a = 1.2e6, z0 = 0.137e-3;
  const auto grid = Grid::uniform(-1e-3, 1e-3, 801);
  Eigen::MatrixXd phi(1, 801);
  for (int j = 0; j < 801; ++j) phi(0, j) = a * (grid[j] - z0) * (grid[j] - z0);
  const auto basis = AxialBasis::from_samples(grid, phi);
  const std::vector<double> u{1.0};
  const auto w = well_analysis(superpose(basis, u), IonSpecies::calcium40(), -0.9e-3, 0.9e-3);
  const double omega = std::sqrt(kE * 2 * a / kMass40);
  EXPECT_NEAR(w.z_min, z0, 1e-9);
  EXPECT_NEAR(w.omega_z / omega, 1.0, 1e-6);
  // lower barrier is the right edge
  EXPECT_NEAR(w.axial_depth, a * (1e-3 - z0) * (1e-3 - z0), 1e-6);
}

TEST(Well, ZeroVoltagesHaveNoWell) {
  const auto basis = default_basis();
  const std::vector<double> u(15, 0.0);
  EXPECT_THROW(well_analysis(superpose(basis, u), IonSpecies::calcium40(), -5e-3, 5e-3),
               NoWellError);
}

TEST(Well, LoadingConfigurationIsConfining) {
  const auto basis = default_basis();
  std::vector<double> u(15, 0.0);
  u[6] = 6.0;
  u[12] = 8.0;
  const auto w = well_analysis(superpose(basis, u), IonSpecies::calcium40(), -1.5e-3, 1.5e-3);
  // the higher voltage on the right pushes the minimum left of centre
  EXPECT_LT(w.z_min, 0.0);
  EXPECT_GT(w.z_min, -0.5e-3);
  EXPECT_GT(w.omega_z / kTwoPi, 100e3);
  EXPECT_LT(w.omega_z / kTwoPi, 300e3);
  EXPECT_GT(w.axial_depth, 0.1);
}

TEST(Radial, FormulaOracle) {
  RadialParameters p;
  p.kappa = 1.0;
  const auto r = mathieu_q(p, IonSpecies::calcium40());
  const double omega = 2 * M_PI * 11.81e6;
  const double q = kE * 408.0 / (kMass40 * 1e-6 * omega * omega);
  EXPECT_NEAR(r.mathieu_q, q, 1e-12 * q);
  EXPECT_NEAR(r.mathieu_q, 0.179, 0.001);
  EXPECT_NEAR(r.omega_rad, q * omega / std::sqrt(8.0), 1e-9 * r.omega_rad);
  EXPECT_NEAR(r.ideal_depth, q * 204.0 / 8.0, 1e-12);
}

TEST(Radial, KappaScalesLinearly) {
  RadialParameters p;
  const auto a = mathieu_q(p, IonSpecies::calcium40());
  p.kappa = 0.45;
  const auto b = mathieu_q(p, IonSpecies::calcium40());
  EXPECT_NEAR(b.mathieu_q / a.mathieu_q, 0.5, 1e-12);
  p.kappa = 1.2;
  EXPECT_THROW(mathieu_q(p, IonSpecies::calcium40()), InvalidInput);
}

TEST(Crystal, ClosedFormTwoAndThreeIons) {
  const auto sp = IonSpecies::calcium40();
  const double w = kTwoPi * 191e3;
  const double ell = coulomb_length(w, sp);
  const auto z2 = ion_crystal_positions(w, sp, 2);
  EXPECT_NEAR(z2[1] / ell, std::cbrt(0.25), 1e-10);
  EXPECT_NEAR(z2[0], -z2[1], 1e-18);
  const auto z3 = ion_crystal_positions(w, sp, 3);
  EXPECT_NEAR(z3[1], 0.0, 1e-15);
  EXPECT_NEAR(z3[2] / ell, std::cbrt(1.25), 1e-10);
}

TEST(Crystal, MatchesBruteForceMinimization) {
  const auto sp = IonSpecies::calcium40();
  const double w = kTwoPi * 200e3;
  const double ell = coulomb_length(w, sp);
  for (std::size_t n : {2u, 3u, 5u}) {
    const auto z = ion_crystal_positions(w, sp, n);
    const auto u = brute_force_chain(n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(z[i] / ell, u[i], 1e-6 * (1 + std::abs(u[i])));
  }
}

TEST(Crystal, SpacingAt191kHz) {
  const auto z = ion_crystal_positions(kTwoPi * 191e3, IonSpecies::calcium40(), 2);
  EXPECT_NEAR((z[1] - z[0]) * 1e6, 16.9, 0.05);
}

TEST(Crystal, RejectsInvalidCounts) {
  const auto sp = IonSpecies::calcium40();
  EXPECT_THROW(ion_crystal_positions(1e6, sp, 0), InvalidInput);
  EXPECT_THROW(ion_crystal_positions(1e6, sp, 31), InvalidInput);
  EXPECT_THROW(ion_crystal_positions(-1.0, sp, 2), InvalidInput);
  const auto z = ion_crystal_positions(kTwoPi * 200e3, sp, 30);
  for (std::size_t i = 1; i < z.size(); ++i) EXPECT_GT(z[i], z[i - 1]);
}
