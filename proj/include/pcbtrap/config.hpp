#pragma once

// key = value configuration with unit-suffixed keys. Unknown keys are
// rejected; every key has a default.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pcbtrap/cooling.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/experiment.hpp"
#include "pcbtrap/io.hpp"
#include "pcbtrap/micromotion.hpp"
#include "pcbtrap/trap_model.hpp"
#include "pcbtrap/waveform.hpp"

namespace pcbtrap {

inline constexpr const char* kConfigEnvironment = "PCBTRAP_CONFIG";

enum class KeyType { number, integer, boolean, text };

struct ConfigKey {
  const char* name;
  KeyType type;
  const char* fallback;  // empty: no default, must be set where required
  const char* help;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"geometry.groove_um", KeyType::number, "120", "insulation groove width"},
      {"geometry.wide_segment_mm", KeyType::number, "2", "loading/taper segment width"},
      {"geometry.narrow_segment_mm", KeyType::number, "0.5", "experimental segment width"},
      {"geometry.blade_separation_experimental_mm", KeyType::number, "2", ""},
      {"geometry.blade_separation_loading_mm", KeyType::number, "4", ""},
      {"basis.file", KeyType::text, "", "tabulated basis; empty selects the arctan surrogate"},
      {"basis.falloff_mm", KeyType::number, "1", "surrogate falloff length"},
      {"basis.grid_min_mm", KeyType::number, "-14", ""},
      {"basis.grid_max_mm", KeyType::number, "7", ""},
      {"basis.grid_points", KeyType::integer, "4201", ""},
      {"ion.mass_amu", KeyType::number, "40", ""},
      {"ion.charge_e", KeyType::number, "1", ""},
      {"drive.freq_mhz", KeyType::number, "11.81", "RF drive frequency"},
      {"drive.vpp_v", KeyType::number, "408", "RF peak-to-peak amplitude"},
      {"drive.kappa", KeyType::number, "0.90", "geometric efficiency"},
      {"drive.r0_mm", KeyType::number, "1", "ion-electrode distance"},
      {"dac.enabled", KeyType::boolean, "true", ""},
      {"dac.bits", KeyType::integer, "16", ""},
      {"dac.vmin_v", KeyType::number, "-10", ""},
      {"dac.vmax_v", KeyType::number, "10", ""},
      {"dac.update_mhz", KeyType::number, "1", ""},
      {"solver.lambda", KeyType::number, "1e-5", "Tikhonov weight"},
      {"solver.vmin_v", KeyType::number, "-10", ""},
      {"solver.vmax_v", KeyType::number, "10", ""},
      {"solver.window_mm", KeyType::number, "0.75", "half-width of the fitted region"},
      {"solver.samples", KeyType::integer, "61", ""},
      {"solver.constraint_weight", KeyType::number, "1e8", ""},
      {"solver.stray_field_v_per_m", KeyType::number, "0", ""},
      {"solver.freq_tolerance", KeyType::number, "0.01", "relative"},
      {"solver.position_tolerance_um", KeyType::number, "1", ""},
      {"ramp.distance_mm", KeyType::number, "2", "one-way transport distance"},
      {"ramp.tau", KeyType::number, "4", "round trip in secular periods"},
      {"ramp.sigma", KeyType::number, "2", "erf slope parameter"},
      {"ramp.freq_khz", KeyType::number, "200", "transport well frequency"},
      {"load.voltages_v", KeyType::text, "7:6, 13:8", "segment:volts pairs"},
      {"load.trim_segment", KeyType::integer, "9", "0 disables trimming"},
      {"load.mismatch_um", KeyType::number, "0", "offset of the loading minimum"},
      {"sequence.model", KeyType::text, "full", "full | harmonic"},
      {"sequence.transport", KeyType::boolean, "true", "false replaces the ramp by a wait"},
      {"sequence.morph_steps", KeyType::integer, "10", ""},
      {"sequence.settle_before", KeyType::integer, "0", "update intervals held before the ramp"},
      {"sequence.settle_after", KeyType::integer, "0", "update intervals held after the ramp"},
      {"sequence.loss_threshold", KeyType::number, "0.30", "fraction of the well depth"},
      {"sequence.loss_depth_ev", KeyType::text, "auto", "auto uses the transport well depth"},
      {"sequence.integration_step_ns", KeyType::number, "20", ""},
      {"sequence.trials", KeyType::integer, "20", "attempts per sweep point"},
      {"sequence.background_loss", KeyType::number, "", "per-attempt loss without transport"},
      {"laser.wavelength_nm", KeyType::number, "397", ""},
      {"laser.linewidth_mhz", KeyType::number, "21.6", "natural linewidth"},
      {"laser.detuning_mhz", KeyType::number, "-10.8", ""},
      {"laser.saturation", KeyType::number, "1", "peak saturation parameter"},
      {"laser.waist_um", KeyType::number, "60", ""},
      {"laser.k_axial", KeyType::number, "0.70710678118654757", "projection on the axis"},
      {"laser.detection_efficiency", KeyType::number, "0.40", ""},
      {"laser.steady_rate_khz", KeyType::number, "20", "detected rate of a cold ion"},
      {"heating.rate_ev_per_s", KeyType::number, "3e-3", ""},
      {"trace.duration_ms", KeyType::number, "20", ""},
      {"trace.bin_us", KeyType::number, "10", ""},
      {"trace.trap_freq_khz", KeyType::number, "200", "secular frequency during cooling"},
      {"estimator.waist_sigma_um", KeyType::number, "10", ""},
      {"estimator.saturation_sigma", KeyType::number, "0.15", "relative"},
      {"estimator.detuning_sigma_mhz", KeyType::number, "30", ""},
      {"micromotion.bins", KeyType::integer, "32", ""},
      {"micromotion.fold", KeyType::text, "full", "full | double"},
      {"micromotion.reference_phase_rad", KeyType::number, "0", ""},
      {"micromotion.sim_voltages_v", KeyType::text, "97.5:0.7:104.5", "start:step:stop"},
      {"micromotion.sim_optimum_v", KeyType::number, "101.6", ""},
      {"micromotion.sim_depth_per_v", KeyType::number, "0.04", ""},
      {"micromotion.sim_rate_khz", KeyType::number, "20", ""},
      {"micromotion.sim_dwell_s", KeyType::number, "27", ""},
      {"crystal.ions", KeyType::integer, "2", ""},
      {"crystal.freq_khz", KeyType::number, "191", ""},
      {"seed", KeyType::integer, "1", ""},
  };
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_schema())
    if (name == k.name) return &k;
  return nullptr;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_schema())
      if (*k.fallback || k.type == KeyType::text) values_[k.name] = k.fallback;
  }

  static Config parse(std::istream& is, const std::string& source = "config") {
    Config c;
    std::string line;
    long n = 0;
    while (std::getline(is, line)) {
      ++n;
      const auto hash = line.find('#');
      const std::string s = io::trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (s.empty()) continue;
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ParseError(source + ": expected key = value", n);
      const std::string key = io::trim(s.substr(0, eq));
      const std::string value = io::trim(s.substr(eq + 1));
      try {
        c.set(key, value);
      } catch (const InvalidInput& e) {
        throw ParseError(source + ": " + e.what(), n);
      }
    }
    return c;
  }

  static Config load(const std::string& path) {
    auto is = io::open_input(path);
    return parse(is, path);
  }

  void set(const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(key);
    if (!k) throw InvalidInput("unknown key '" + key + "'");
    switch (k->type) {
      case KeyType::number:
        check_number(key, value);
        break;
      case KeyType::integer:
        check_integer(key, value);
        break;
      case KeyType::boolean:
        if (value != "true" && value != "false")
          throw InvalidInput(key + ": expected true or false");
        break;
      case KeyType::text:
        break;
    }
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidInput("required key '" + key + "' is not set");
    return it->second;
  }
  double number(const std::string& key) const { return io::parse_double(text(key), 0); }
  long long integer(const std::string& key) const { return std::stoll(text(key)); }
  bool boolean(const std::string& key) const { return text(key) == "true"; }

  /// Canonical "key=value" lines in key order; numbers in 17-digit form.
  std::string canonical() const {
    std::string out;
    for (const auto& [key, value] : values_) {
      const ConfigKey* k = find_key(key);
      std::string v = value;
      if (k->type == KeyType::number) v = io::num(io::parse_double(value, 0));
      if (k->type == KeyType::integer) v = std::to_string(std::stoll(value));
      out += key + '=' + v + '\n';
    }
    return out;
  }

  /// 64-bit FNV-1a of the canonical form, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

 private:
  static void check_number(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    try {
      const double x = std::stod(v, &pos);
      if (!std::isfinite(x)) pos = 0;
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != v.size()) throw InvalidInput(key + ": expected a number, got '" + v + "'");
  }
  static void check_integer(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    try {
      (void)std::stoll(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != v.size())
      throw InvalidInput(key + ": expected an integer, got '" + v + "'");
  }

  std::map<std::string, std::string> values_;
};

// --- builders

inline TrapGeometry geometry_from(const Config& c) {
  auto g = TrapGeometry::pcb_default(c.number("geometry.groove_um") * 1e-6,
                                     c.number("geometry.wide_segment_mm") * 1e-3,
                                     c.number("geometry.narrow_segment_mm") * 1e-3);
  g.blade_separation_experimental = c.number("geometry.blade_separation_experimental_mm") * 1e-3;
  g.blade_separation_loading = c.number("geometry.blade_separation_loading_mm") * 1e-3;
  g.validate();
  return g;
}

inline AxialBasis basis_from(const Config& c, const TrapGeometry& g) {
  if (const auto& file = c.text("basis.file"); !file.empty()) {
    auto is = io::open_input(file);
    auto b = io::read_basis(is);
    if (b.electrode_count() != g.size())
      throw InvalidInput("basis file has " + std::to_string(b.electrode_count()) +
                         " electrodes, geometry has " + std::to_string(g.size()));
    return b;
  }
  const long long n = c.integer("basis.grid_points");
  if (n < 3) throw InvalidInput("basis.grid_points must be at least 3");
  return analytic_basis(g, c.number("basis.falloff_mm") * 1e-3,
                        Grid::uniform(c.number("basis.grid_min_mm") * 1e-3,
                                      c.number("basis.grid_max_mm") * 1e-3,
                                      static_cast<std::size_t>(n)));
}

inline IonSpecies species_from(const Config& c) {
  IonSpecies s;
  s.mass = c.number("ion.mass_amu") * kAtomicMassUnit;
  s.charge = c.number("ion.charge_e") * kElementaryCharge;
  s.validate();
  return s;
}

inline RadialParameters radial_from(const Config& c) {
  RadialParameters p;
  p.drive_frequency = kTwoPi * c.number("drive.freq_mhz") * 1e6;
  p.v_pp = c.number("drive.vpp_v");
  p.kappa = c.number("drive.kappa");
  p.r0 = c.number("drive.r0_mm") * 1e-3;
  return p;
}

inline std::optional<DacSpec> dac_from(const Config& c) {
  if (!c.boolean("dac.enabled")) return std::nullopt;
  DacSpec d;
  d.bits = static_cast<int>(c.integer("dac.bits"));
  d.v_min = c.number("dac.vmin_v");
  d.v_max = c.number("dac.vmax_v");
  d.update_rate = c.number("dac.update_mhz") * 1e6;
  d.validate();
  return d;
}

inline SolverConfig solver_from(const Config& c) {
  SolverConfig s;
  s.lambda = c.number("solver.lambda");
  s.v_min = c.number("solver.vmin_v");
  s.v_max = c.number("solver.vmax_v");
  s.fit_window = c.number("solver.window_mm") * 1e-3;
  s.fit_samples = static_cast<int>(c.integer("solver.samples"));
  s.constraint_weight = c.number("solver.constraint_weight");
  s.stray_field = c.number("solver.stray_field_v_per_m");
  s.omega_tolerance = c.number("solver.freq_tolerance");
  s.position_tolerance = c.number("solver.position_tolerance_um") * 1e-6;
  s.validate();
  return s;
}

inline RampSpec ramp_from(const Config& c) {
  auto r = RampSpec::from_tau(c.number("ramp.tau"), c.number("ramp.sigma"),
                              kTwoPi * c.number("ramp.freq_khz") * 1e3,
                              c.number("ramp.distance_mm") * 1e-3,
                              1.0 / (c.number("dac.update_mhz") * 1e6));
  r.validate();
  return r;
}

inline LaserParams laser_from(const Config& c) {
  LaserParams l;
  l.wavelength = c.number("laser.wavelength_nm") * 1e-9;
  l.gamma = kTwoPi * c.number("laser.linewidth_mhz") * 1e6;
  l.detuning = kTwoPi * c.number("laser.detuning_mhz") * 1e6;
  l.s0 = c.number("laser.saturation");
  l.waist = c.number("laser.waist_um") * 1e-6;
  l.k_axial = c.number("laser.k_axial");
  l.detection_efficiency = c.number("laser.detection_efficiency");
  l.validate();
  return calibrate_collection(l, c.number("laser.steady_rate_khz") * 1e3);
}

inline HeatingModel heating_from(const Config& c) {
  HeatingModel h;
  h.rate = c.number("heating.rate_ev_per_s");
  h.quantum = to_ev(kHbar * kTwoPi * c.number("ramp.freq_khz") * 1e3);
  h.validate();
  return h;
}

inline EstimatorUncertainties estimator_from(const Config& c) {
  EstimatorUncertainties u;
  u.waist = c.number("estimator.waist_sigma_um") * 1e-6;
  u.saturation_fraction = c.number("estimator.saturation_sigma");
  u.detuning = kTwoPi * c.number("estimator.detuning_sigma_mhz") * 1e6;
  return u;
}

inline std::vector<std::pair<int, double>> parse_segment_voltages(const std::string& text) {
  std::vector<std::pair<int, double>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = io::trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InvalidInput("expected segment:volts, got '" + item + "'");
    try {
      out.emplace_back(std::stoi(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw InvalidInput("expected segment:volts, got '" + item + "'");
    }
  }
  return out;
}

inline SequenceSpec sequence_from(const Config& c) {
  SequenceSpec s;
  s.load.voltages = parse_segment_voltages(c.text("load.voltages_v"));
  s.load.trim_segment = static_cast<int>(c.integer("load.trim_segment"));
  s.load.mismatch = c.number("load.mismatch_um") * 1e-6;
  s.ramp = ramp_from(c);
  s.solver = solver_from(c);
  s.dac = dac_from(c);
  s.morph_steps = static_cast<std::size_t>(c.integer("sequence.morph_steps"));
  s.morph_dt = s.ramp.dt_update;
  const long long before = c.integer("sequence.settle_before"), after = c.integer("sequence.settle_after");
  if (before < 0 || after < 0) throw InvalidInput("settle intervals must be non-negative");
  s.settle_before = static_cast<std::size_t>(before);
  s.settle_after = static_cast<std::size_t>(after);
  s.cooling = laser_from(c);
  s.calibrated_rate = c.number("laser.steady_rate_khz") * 1e3;
  s.heating = heating_from(c);
  s.loss_threshold = c.number("sequence.loss_threshold");
  if (const auto& d = c.text("sequence.loss_depth_ev"); d != "auto")
    s.loss_depth = io::parse_double(d, 0);
  s.seed = static_cast<std::uint64_t>(c.integer("seed"));
  const auto& model = c.text("sequence.model");
  if (model == "full")
    s.model = TransportModel::full;
  else if (model == "harmonic")
    s.model = TransportModel::harmonic;
  else
    throw InvalidInput("sequence.model must be full or harmonic");
  s.transport = c.boolean("sequence.transport");
  s.integration_step = c.number("sequence.integration_step_ns") * 1e-9;
  s.trace_duration = c.number("trace.duration_ms") * 1e-3;
  s.trace_bin = c.number("trace.bin_us") * 1e-6;
  s.validate();
  return s;
}

/// Parses "a:step:b" (inclusive) or a comma-separated list.
inline std::vector<double> parse_value_list(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos && text.find(',') == std::string::npos) {
    std::stringstream ss(text);
    std::string a, s, b;
    std::getline(ss, a, ':');
    std::getline(ss, s, ':');
    std::getline(ss, b);
    const double lo = io::parse_double(a, 0), step = io::parse_double(s, 0),
                 hi = io::parse_double(b, 0);
    if (!(step > 0) || hi < lo) throw InvalidInput("invalid range '" + text + "'");
    const auto n = static_cast<long long>(std::floor((hi - lo) / step + 1e-9));
    for (long long i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!io::trim(item).empty()) out.push_back(io::parse_double(item, 0));
  if (out.empty()) throw InvalidInput("empty value list");
  return out;
}

inline ScanSimulation scan_simulation_from(const Config& c) {
  ScanSimulation s;
  s.voltages = parse_value_list(c.text("micromotion.sim_voltages_v"));
  s.v_opt = c.number("micromotion.sim_optimum_v");
  s.depth_per_volt = c.number("micromotion.sim_depth_per_v");
  s.mean_rate = c.number("micromotion.sim_rate_khz") * 1e3;
  s.dwell = c.number("micromotion.sim_dwell_s");
  const long long bins = c.integer("micromotion.bins");
  if (bins < static_cast<long long>(kMinPhaseBins))
    throw InvalidInput("micromotion.bins must be at least 8");
  s.bins = static_cast<std::size_t>(bins);
  s.phase_offset = c.number("micromotion.reference_phase_rad");
  const auto& fold = c.text("micromotion.fold");
  if (fold == "full")
    s.fold = FoldMode::full_period;
  else if (fold == "double")
    s.fold = FoldMode::double_period;
  else
    throw InvalidInput("micromotion.fold must be full or double");
  return s;
}

}  // namespace pcbtrap
