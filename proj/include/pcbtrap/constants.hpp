#pragma once

#include <numbers>

namespace pcbtrap {

// CODATA 2018 exact / recommended values, SI units.
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kElementaryCharge = 1.602176634e-19;   // C
inline constexpr double kAtomicMassUnit = 1.66053906660e-27;   // kg
inline constexpr double kHbar = 1.054571817e-34;               // J s
inline constexpr double kVacuumPermittivity = 8.8541878128e-12;  // F/m
inline constexpr double kBoltzmann = 1.380649e-23;             // J/K

inline constexpr double kJoulePerEv = kElementaryCharge;

inline constexpr double to_ev(double joule) { return joule / kJoulePerEv; }
inline constexpr double to_joule(double ev) { return ev * kJoulePerEv; }

}  // namespace pcbtrap
