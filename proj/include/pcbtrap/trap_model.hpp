#pragma once

// Trap geometry, per-electrode axial basis potentials, their superposition,
// and harmonic-well / radial / ion-crystal characterization.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pcbtrap/constants.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/interpolation.hpp"

namespace pcbtrap {

struct IonSpecies {
  double mass = 40.0 * kAtomicMassUnit;  // kg
  double charge = kElementaryCharge;     // C
  std::string label = "40Ca+";

  static IonSpecies calcium40() { return {}; }

  void validate() const {
    if (!(mass > 0)) throw InvalidInput("ion mass must be positive");
    if (!(charge > 0)) throw InvalidInput("ion charge must be positive");
  }

  /// Curvature of the axial potential (V/m^2) that gives secular frequency omega.
  double curvature_for(double omega) const { return mass * omega * omega / charge; }
};

enum class Zone { loading, taper, experimental };

struct Segment {
  int index = 0;        // 1-based electrode number
  double center = 0.0;  // m
  double width = 0.0;   // m
  Zone zone = Zone::experimental;
};

struct TrapGeometry {
  std::vector<Segment> segments;
  double blade_separation_experimental = 2e-3;  // m
  double blade_separation_loading = 4e-3;       // m

  std::size_t size() const noexcept { return segments.size(); }
  double r0() const { return 0.5 * blade_separation_experimental; }

  const Segment& segment(int index) const {
    for (const auto& s : segments)
      if (s.index == index) return s;
    throw InvalidInput("no segment with index " + std::to_string(index));
  }

  void validate() const {
    if (segments.empty()) throw InvalidInput("geometry has no segments");
    for (std::size_t i = 0; i < segments.size(); ++i) {
      if (!(segments[i].width > 0)) throw InvalidInput("segment width must be positive");
      if (i > 0 && !(segments[i].center > segments[i - 1].center))
        throw InvalidInput("segment centers must be strictly increasing");
    }
  }

  /// Fifteen electrode pairs: three 2 mm loading segments, one 2 mm taper
  /// segment and eleven 0.5 mm experimental segments. Insulation grooves are
  /// 120 um wide. The origin sits at the center of segment 10.
  static TrapGeometry pcb_default(double groove = 120e-6, double wide = 2e-3,
                                  double narrow = 0.5e-3) {
    TrapGeometry g;
    const double pitch = narrow + groove;
    const double c5 = -5.0 * pitch;
    const double c4 = c5 - 0.5 * narrow - groove - 0.5 * wide;
    const double wide_pitch = wide + groove;
    for (int i = 1; i <= 4; ++i) {
      g.segments.push_back({i, c4 - (4 - i) * wide_pitch, wide,
                            i == 4 ? Zone::taper : Zone::loading});
    }
    for (int i = 5; i <= 15; ++i) {
      g.segments.push_back({i, c5 + (i - 5) * pitch, narrow, Zone::experimental});
    }
    return g;
  }
};

enum class BasisProvenance { analytic, imported };

/// Unit-voltage axial responses phi_i(z) tabulated on a shared grid, together
/// with their first and second derivatives.
class AxialBasis {
 public:
  AxialBasis() = default;

  AxialBasis(Grid grid, Eigen::MatrixXd phi, Eigen::MatrixXd dphi, Eigen::MatrixXd d2phi,
             BasisProvenance provenance)
      : grid_(std::move(grid)),
        phi_(std::move(phi)),
        dphi_(std::move(dphi)),
        d2phi_(std::move(d2phi)),
        provenance_(provenance) {
    if (phi_.cols() != static_cast<Eigen::Index>(grid_.size()) || dphi_.rows() != phi_.rows() ||
        d2phi_.rows() != phi_.rows() || dphi_.cols() != phi_.cols() ||
        d2phi_.cols() != phi_.cols())
      throw InvalidInput("basis table dimensions do not match the grid");
  }

  /// Builds derivative tables by finite differences (imported field data).
  static AxialBasis from_samples(Grid grid, Eigen::MatrixXd phi) {
    const auto n = phi.rows();
    Eigen::MatrixXd d1(n, phi.cols()), d2(n, phi.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> row(phi.row(i).begin(), phi.row(i).end());
      auto first = finite_difference(grid, row);
      auto second = finite_difference(grid, first);
      for (Eigen::Index j = 0; j < phi.cols(); ++j) {
        d1(i, j) = first[static_cast<std::size_t>(j)];
        d2(i, j) = second[static_cast<std::size_t>(j)];
      }
    }
    return AxialBasis(std::move(grid), std::move(phi), std::move(d1), std::move(d2),
                      BasisProvenance::imported);
  }

  std::size_t electrode_count() const noexcept { return static_cast<std::size_t>(phi_.rows()); }
  const Grid& grid() const noexcept { return grid_; }
  const Eigen::MatrixXd& phi() const noexcept { return phi_; }
  const Eigen::MatrixXd& dphi() const noexcept { return dphi_; }
  const Eigen::MatrixXd& d2phi() const noexcept { return d2phi_; }
  BasisProvenance provenance() const noexcept { return provenance_; }

  double value(std::size_t e, double z) const { return sample(phi_, dphi_, e, z).value; }
  double slope(std::size_t e, double z) const { return sample(dphi_, d2phi_, e, z).value; }
  double curvature(std::size_t e, double z) const { return sample(dphi_, d2phi_, e, z).slope; }

 private:
  HermiteSample sample(const Eigen::MatrixXd& f, const Eigen::MatrixXd& df, std::size_t e,
                       double z) const {
    const auto i = grid_.interval(z);
    const auto r = static_cast<Eigen::Index>(e);
    const auto c = static_cast<Eigen::Index>(i);
    return hermite(grid_[i], grid_[i + 1], f(r, c), f(r, c + 1), df(r, c), df(r, c + 1), z);
  }

  Grid grid_;
  Eigen::MatrixXd phi_, dphi_, d2phi_;
  BasisProvenance provenance_ = BasisProvenance::analytic;
};

/// Arctan-difference surrogate for one electrode pair of width `width` centred
/// at `center`, with falloff length `rho` (ion-electrode distance).
struct ArctanElectrode {
  double center;
  double width;
  double rho;

  double value(double z) const {
    const double u1 = (z - center + 0.5 * width) / rho;
    const double u2 = (z - center - 0.5 * width) / rho;
    return (std::atan(u1) - std::atan(u2)) / kPi;
  }
  double slope(double z) const {
    const double u1 = (z - center + 0.5 * width) / rho;
    const double u2 = (z - center - 0.5 * width) / rho;
    return (1.0 / (1.0 + u1 * u1) - 1.0 / (1.0 + u2 * u2)) / (kPi * rho);
  }
  double curvature(double z) const {
    const double u1 = (z - center + 0.5 * width) / rho;
    const double u2 = (z - center - 0.5 * width) / rho;
    const double a = 1.0 + u1 * u1;
    const double b = 1.0 + u2 * u2;
    return (-2.0 * u1 / (a * a) + 2.0 * u2 / (b * b)) / (kPi * rho * rho);
  }
};

inline AxialBasis analytic_basis(const TrapGeometry& geometry, double gap_distance,
                                 const Grid& grid) {
  geometry.validate();
  if (!(gap_distance > 0)) throw InvalidInput("gap distance must be positive");
  for (const auto& s : geometry.segments) {
    if (!grid.contains(s.center)) throw InvalidInput("grid does not span all segment centers");
  }
  const auto n = static_cast<Eigen::Index>(geometry.size());
  const auto m = static_cast<Eigen::Index>(grid.size());
  Eigen::MatrixXd phi(n, m), d1(n, m), d2(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = geometry.segments[static_cast<std::size_t>(i)];
    const ArctanElectrode el{s.center, s.width, gap_distance};
    for (Eigen::Index j = 0; j < m; ++j) {
      const double z = grid[static_cast<std::size_t>(j)];
      phi(i, j) = el.value(z);
      d1(i, j) = el.slope(z);
      d2(i, j) = el.curvature(z);
    }
  }
  return AxialBasis(grid, std::move(phi), std::move(d1), std::move(d2),
                    BasisProvenance::analytic);
}

/// Superposed axial potential phi(z) = sum_i U_i phi_i(z) - E_stray z, in volts.
class AxialPotential {
 public:
  AxialPotential() = default;

  AxialPotential(const AxialBasis& basis, std::span<const double> voltages,
                 double stray_field = 0.0)
      : grid_(basis.grid()), voltages_(voltages.begin(), voltages.end()), stray_(stray_field) {
    if (voltages.size() != basis.electrode_count())
      throw InvalidInput("voltage vector length " + std::to_string(voltages.size()) +
                         " does not match electrode count " +
                         std::to_string(basis.electrode_count()));
    Eigen::Map<const Eigen::RowVectorXd> u(voltages.data(),
                                           static_cast<Eigen::Index>(voltages.size()));
    Eigen::RowVectorXd f = u * basis.phi();
    Eigen::RowVectorXd d1 = u * basis.dphi();
    Eigen::RowVectorXd d2 = u * basis.d2phi();
    const std::size_t m = grid_.size();
    phi_.resize(m);
    dphi_.resize(m);
    d2phi_.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      phi_[j] = f(c) - stray_ * grid_[j];
      dphi_[j] = d1(c) - stray_;
      d2phi_[j] = d2(c);
    }
  }

  const Grid& grid() const noexcept { return grid_; }
  std::span<const double> voltages() const noexcept { return voltages_; }
  std::span<const double> samples() const noexcept { return phi_; }
  std::span<const double> slope_samples() const noexcept { return dphi_; }

  double value(double z) const {
    const auto i = grid_.interval(z);
    return hermite(grid_[i], grid_[i + 1], phi_[i], phi_[i + 1], dphi_[i], dphi_[i + 1], z).value;
  }
  double slope(double z) const { return slope_and_curvature(z).value; }
  double curvature(double z) const { return slope_and_curvature(z).slope; }

  /// dphi/dz and d2phi/dz2 from the cubic interpolant of the tabulated derivative.
  HermiteSample slope_and_curvature(double z) const {
    const auto i = grid_.interval(z);
    return hermite(grid_[i], grid_[i + 1], dphi_[i], dphi_[i + 1], d2phi_[i], d2phi_[i + 1], z);
  }

 private:
  Grid grid_;
  std::vector<double> voltages_;
  double stray_ = 0.0;
  std::vector<double> phi_, dphi_, d2phi_;
};

inline AxialPotential superpose(const AxialBasis& basis, std::span<const double> voltages,
                                double stray_field = 0.0) {
  return AxialPotential(basis, voltages, stray_field);
}

struct WellCharacterization {
  double z_min = 0.0;        // m
  double omega_z = 0.0;      // rad/s
  double axial_depth = 0.0;  // eV
  double curvature = 0.0;    // V/m^2
  double phi_min = 0.0;      // V
};

/// Newton refinement of a stationary point of the potential, starting at z.
inline std::optional<double> refine_minimum(const AxialPotential& pot, double z, double lo,
                                            double hi) {
  for (int it = 0; it < 60; ++it) {
    const auto s = pot.slope_and_curvature(z);
    if (!(s.slope > 0)) return std::nullopt;
    double step = s.value / s.slope;
    const double zn = std::clamp(z - step, lo, hi);
    if (std::abs(zn - z) < 1e-13) return zn;
    z = zn;
  }
  return z;
}

/// Nearest local minimum reached by walking downhill on the grid from z_start.
/// Returns nullopt if the walk runs into the grid boundary.
inline std::optional<double> descend_to_minimum(const AxialPotential& pot, double z_start) {
  const auto& g = pot.grid();
  const auto phi = pot.samples();
  std::size_t i = g.interval(z_start);
  if (z_start - g[i] > g[i + 1] - z_start) ++i;
  for (;;) {
    if (i == 0 || i + 1 >= g.size()) return std::nullopt;
    if (phi[i - 1] < phi[i]) {
      --i;
    } else if (phi[i + 1] < phi[i]) {
      ++i;
    } else {
      break;
    }
  }
  return refine_minimum(pot, g[i], g[i - 1], g[i + 1]);
}

/// Least-squares parabola through the potential over [z0-h, z0+h]; returns
/// the curvature d2phi/dz2.
inline double fitted_curvature(const AxialPotential& pot, double z0, double h,
                               int samples = 41) {
  Eigen::MatrixXd a(samples, 3);
  Eigen::VectorXd b(samples);
  for (int k = 0; k < samples; ++k) {
    const double x = -h + 2.0 * h * k / (samples - 1);
    a(k, 0) = 1.0;
    a(k, 1) = x / h;
    a(k, 2) = (x / h) * (x / h);
    b(k) = pot.value(z0 + x);
  }
  Eigen::Vector3d c = a.colPivHouseholderQr().solve(b);
  return 2.0 * c(2) / (h * h);
}

struct WellOptions {
  double fit_halfwidth = 25e-6;  // m; quadratic fit region around z_min
};

/// Locates the potential minimum inside [z_a, z_b] and characterizes the well.
inline WellCharacterization well_analysis(const AxialPotential& pot, const IonSpecies& species,
                                          double z_a, double z_b, WellOptions options = {}) {
  species.validate();
  const auto& g = pot.grid();
  if (!(z_b > z_a) || z_a < g.front() || z_b > g.back())
    throw InvalidInput("search window must lie inside the basis grid");
  const auto phi = pot.samples();
  std::size_t best = g.size();
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (g[j] < z_a || g[j] > z_b) continue;
    if (best == g.size() || phi[j] < phi[best]) best = j;
  }
  if (best == g.size() || best == 0 || best + 1 >= g.size() || g[best - 1] < z_a ||
      g[best + 1] > z_b || !(phi[best - 1] > phi[best]) || !(phi[best + 1] > phi[best]))
    throw NoWellError("no interior potential minimum in the search window");
  const auto z_ref = refine_minimum(pot, g[best], g[best - 1], g[best + 1]);
  if (!z_ref) throw NoWellError("potential is not convex at the located minimum");

  WellCharacterization w;
  w.z_min = *z_ref;
  w.phi_min = pot.value(w.z_min);
  const double h = std::min({options.fit_halfwidth, w.z_min - g.front(), g.back() - w.z_min});
  w.curvature = fitted_curvature(pot, w.z_min, h);
  if (!(w.curvature > 0)) throw NoWellError("non-positive curvature at the potential minimum");
  w.omega_z = std::sqrt(species.charge * w.curvature / species.mass);

  double left = -std::numeric_limits<double>::infinity();
  double right = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (g[j] <= w.z_min) left = std::max(left, phi[j]);
    if (g[j] >= w.z_min) right = std::max(right, phi[j]);
  }
  // energy in eV equals charge (in e) times volts
  const double barrier = std::min(left, right) - w.phi_min;
  w.axial_depth = std::max(0.0, barrier) * species.charge / kElementaryCharge;
  return w;
}

struct RadialParameters {
  double drive_frequency = kTwoPi * 11.81e6;  // rad/s
  double v_pp = 408.0;                        // V peak-to-peak
  double kappa = 0.90;                        // geometric efficiency
  double r0 = 1e-3;                           // m
};

struct RadialCharacterization {
  RadialParameters params;
  double mathieu_q = 0.0;
  double omega_rad = 0.0;    // rad/s, lowest-order secular frequency
  double ideal_depth = 0.0;  // eV, ideal quadrupole pseudopotential depth
};

inline RadialCharacterization mathieu_q(const RadialParameters& p, const IonSpecies& species) {
  species.validate();
  if (!(p.drive_frequency > 0) || !(p.v_pp > 0) || !(p.r0 > 0))
    throw InvalidInput("radial parameters must be positive");
  if (!(p.kappa > 0) || p.kappa > 1) throw InvalidInput("kappa must lie in (0, 1]");
  const double amplitude = 0.5 * p.v_pp;
  RadialCharacterization r;
  r.params = p;
  r.mathieu_q = 2.0 * species.charge * amplitude * p.kappa /
                (species.mass * p.r0 * p.r0 * p.drive_frequency * p.drive_frequency);
  r.omega_rad = r.mathieu_q * p.drive_frequency / (2.0 * std::numbers::sqrt2);
  r.ideal_depth = r.mathieu_q * amplitude / 8.0 * species.charge / kElementaryCharge;
  return r;
}

/// Coulomb length scale (Q^2 / (4 pi eps0 m omega^2))^(1/3) of a linear crystal.
inline double coulomb_length(double omega_z, const IonSpecies& species) {
  return std::cbrt(species.charge * species.charge /
                   (4.0 * kPi * kVacuumPermittivity * species.mass * omega_z * omega_z));
}

inline constexpr std::size_t kMaxLinearCrystal = 30;

/// Equilibrium positions of N ions in a harmonic axial well, sorted ascending.
inline std::vector<double> ion_crystal_positions(double omega_z, const IonSpecies& species,
                                                 std::size_t n) {
  species.validate();
  if (n < 1) throw InvalidInput("ion count must be at least 1");
  if (n > kMaxLinearCrystal) throw InvalidInput("linear-chain model supports at most 30 ions");
  if (!(omega_z > 0)) throw InvalidInput("axial frequency must be positive");
  const double ell = coulomb_length(omega_z, species);
  const auto N = static_cast<Eigen::Index>(n);

  // Dimensionless energy sum u_i^2/2 + sum_{i<j} 1/|u_i-u_j|; Newton iteration.
  Eigen::VectorXd u(N);
  for (Eigen::Index i = 0; i < N; ++i)
    u(i) = (static_cast<double>(i) - 0.5 * static_cast<double>(N - 1)) *
           (N > 1 ? 2.0 * std::pow(static_cast<double>(N), 0.3) / static_cast<double>(N) : 0.0);
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd grad = u;
    Eigen::MatrixXd hess = Eigen::MatrixXd::Identity(N, N);
    for (Eigen::Index i = 0; i < N; ++i) {
      for (Eigen::Index j = 0; j < N; ++j) {
        if (i == j) continue;
        const double d = u(i) - u(j);
        const double ad = std::abs(d);
        grad(i) -= (d > 0 ? 1.0 : -1.0) / (ad * ad);
        hess(i, i) += 2.0 / (ad * ad * ad);
        hess(i, j) -= 2.0 / (ad * ad * ad);
      }
    }
    Eigen::VectorXd step = hess.ldlt().solve(grad);
    // keep ordering intact
    double scale = 1.0;
    for (Eigen::Index i = 0; i + 1 < N; ++i) {
      const double gap = u(i + 1) - u(i);
      const double dgap = -(step(i + 1) - step(i));
      if (dgap < -0.5 * gap) scale = std::min(scale, 0.5 * gap / -dgap);
    }
    u -= scale * step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-15) break;
  }
  std::vector<double> z(n);
  for (Eigen::Index i = 0; i < N; ++i) z[static_cast<std::size_t>(i)] = u(i) * ell;
  return z;
}

}  // namespace pcbtrap
