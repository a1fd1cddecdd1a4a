// pcbtrap: command-line front end.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcbtrap/config.hpp"
#include "pcbtrap/cooling.hpp"
#include "pcbtrap/dynamics.hpp"
#include "pcbtrap/experiment.hpp"
#include "pcbtrap/io.hpp"
#include "pcbtrap/micromotion.hpp"
#include "pcbtrap/trap_model.hpp"
#include "pcbtrap/waveform.hpp"

using namespace pcbtrap;
using io::num;

namespace {

enum Exit { kOk = 0, kInternal = 1, kInput = 2, kInfeasible = 3 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<long long> seed;
};

struct Run {
  std::string command;
  Config config;
  std::vector<std::string> outputs;

  std::uint64_t seed() const { return static_cast<std::uint64_t>(config.integer("seed")); }

  io::Metadata meta() const {
    return {{"command", command},
            {"config_hash", config.hash()},
            {"seed", std::to_string(config.integer("seed"))},
            {"version", PCBTRAP_VERSION}};
  }
};

Run prepare(const std::string& command, const Common& c) {
  Run r;
  r.command = command;
  std::string path = c.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnvironment)) path = env;
  }
  r.config = path.empty() ? Config{} : Config::load(path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidInput("--set expects key=value, got '" + kv + "'");
    r.config.set(io::trim(kv.substr(0, eq)), io::trim(kv.substr(eq + 1)));
  }
  if (c.seed) r.config.set("seed", std::to_string(*c.seed));
  return r;
}

/// Writes to `path`, or stdout when empty, and records the file.
template <class F>
void emit(Run& run, const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write '" + path + "'");
  write(os);
  if (!os) throw InvalidInput("write to '" + path + "' failed");
  run.outputs.push_back(path);
}

void write_manifest(const Run& run, const std::string& out) {
  if (out.empty()) return;
  nlohmann::ordered_json j;
  j["command"] = run.command;
  j["config_hash"] = run.config.hash();
  j["seed"] = run.config.integer("seed");
  j["version"] = PCBTRAP_VERSION;
  j["outputs"] = run.outputs;
  std::ofstream os(out + ".manifest.json");
  if (!os) throw InvalidInput("cannot write manifest for '" + out + "'");
  os << j.dump(2) << '\n';
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path,
                  std::string("configuration file (default: $") + kConfigEnvironment + ")");
  app->add_option("--set", c.overrides, "override a configuration key, key=value")
      ->allow_extra_args(false);
  app->add_option("-o,--out", c.out, "output file (default: stdout)");
  app->add_option("--seed", c.seed, "random seed");
}

void table_row(std::ostream& os, const std::string& name, double value) {
  os << name << ", " << num(value) << '\n';
}

// --- characterize

int cmd_characterize(const Common& common, const std::string& voltages_text) {
  Run run = prepare("characterize", common);
  const auto& cfg = run.config;
  const auto species = species_from(cfg);
  const auto geometry = geometry_from(cfg);
  const auto basis = basis_from(cfg, geometry);
  const auto solver = solver_from(cfg);
  const auto radial = mathieu_q(radial_from(cfg), species);
  const auto& g = basis.grid();

  auto well_rows = [&](std::ostream& os, const std::string& prefix,
                       const std::vector<double>& u, double lo, double hi) {
    try {
      const auto w = well_analysis(superpose(basis, u, solver.stray_field), species, lo, hi);
      table_row(os, prefix + "_well_found", 1);
      table_row(os, prefix + "_z_min_um", w.z_min * 1e6);
      table_row(os, prefix + "_freq_khz", w.omega_z / kTwoPi * 1e-3);
      table_row(os, prefix + "_depth_ev", w.axial_depth);
    } catch (const NoWellError&) {
      table_row(os, prefix + "_well_found", 0);
    }
  };

  std::vector<double> given;
  if (!voltages_text.empty()) {
    std::stringstream ss(voltages_text);
    std::string item;
    while (std::getline(ss, item, ',')) given.push_back(io::parse_double(item, 0));
    if (given.size() != basis.electrode_count())
      throw InvalidInput("--voltages needs " + std::to_string(basis.electrode_count()) + " values");
  }
  const long long n_ions = cfg.integer("crystal.ions");
  if (n_ions < 1) throw InvalidInput("crystal.ions must be at least 1");

  emit(run, common.out, [&](std::ostream& os) {
    io::write_header(os, "characterize v1", run.meta(), "quantity, value");
    table_row(os, "mathieu_q", radial.mathieu_q);
    table_row(os, "radial_freq_khz", radial.omega_rad / kTwoPi * 1e-3);
    table_row(os, "ideal_radial_depth_ev", radial.ideal_depth);
    if (!voltages_text.empty()) {
      well_rows(os, "axial", given, g.front(), g.back());
    } else {
      const double omega = kTwoPi * cfg.number("ramp.freq_khz") * 1e3;
      const auto sol = solve_voltages(basis, {0.0, omega}, solver, species);
      well_rows(os, "transport", sol.voltages, -1.5e-3, 1.5e-3);
      std::vector<double> load(basis.electrode_count(), 0.0);
      for (auto [index, v] : parse_segment_voltages(cfg.text("load.voltages_v"))) {
        bool found = false;
        for (std::size_t i = 0; i < geometry.size(); ++i)
          if (geometry.segments[i].index == index) load[i] = v, found = true;
        if (!found) throw InvalidInput("load.voltages_v names unknown segment");
      }
      well_rows(os, "loading", load, -1.5e-3, 1.5e-3);
    }
    const double w_c = kTwoPi * cfg.number("crystal.freq_khz") * 1e3;
    const auto z = ion_crystal_positions(w_c, species, static_cast<std::size_t>(n_ions));
    table_row(os, "crystal_ions", static_cast<double>(n_ions));
    table_row(os, "crystal_length_scale_um", coulomb_length(w_c, species) * 1e6);
    for (std::size_t i = 0; i < z.size(); ++i)
      table_row(os, "crystal_position_" + std::to_string(i + 1) + "_um", z[i] * 1e6);
    for (std::size_t i = 0; i + 1 < z.size(); ++i)
      table_row(os, "crystal_spacing_" + std::to_string(i + 1) + "_um", (z[i + 1] - z[i]) * 1e6);
  });
  write_manifest(run, common.out);
  return kOk;
}

// --- waveform

int cmd_waveform(const Common& common) {
  Run run = prepare("waveform", common);
  const auto& cfg = run.config;
  const auto species = species_from(cfg);
  const auto geometry = geometry_from(cfg);
  const auto basis = basis_from(cfg, geometry);
  const auto ramp = ramp_from(cfg);
  const auto w = generate_waveform(basis, ramp, solver_from(cfg), species, dac_from(cfg));
  auto meta = run.meta();
  meta.push_back({"tau", num(ramp.tau())});
  meta.push_back({"sigma", num(ramp.sigma)});
  emit(run, common.out, [&](std::ostream& os) { io::write_waveform(os, w, meta); });
  write_manifest(run, common.out);
  return kOk;
}

// --- transport

int cmd_transport(const Common& common, const std::string& waveform_file,
                  const std::string& model, std::size_t stride) {
  Run run = prepare("transport", common);
  const auto& cfg = run.config;
  const auto species = species_from(cfg);
  const double dt_int = cfg.number("sequence.integration_step_ns") * 1e-9;
  if (stride < 1) throw InvalidInput("--stride must be at least 1");
  auto meta = run.meta();
  Trajectory tr;
  if (!waveform_file.empty() || model == "full") {
    const auto geometry = geometry_from(cfg);
    const auto basis = basis_from(cfg, geometry);
    const auto solver = solver_from(cfg);
    VoltageWaveform w;
    if (!waveform_file.empty()) {
      auto is = io::open_input(waveform_file);
      w = io::read_waveform(is);
      meta.push_back({"waveform", waveform_file});
    } else {
      w = generate_waveform(basis, ramp_from(cfg), solver, species, dac_from(cfg));
    }
    if (w.electrodes() != basis.electrode_count())
      throw InvalidInput("waveform has " + std::to_string(w.electrodes()) +
                         " electrodes, basis has " + std::to_string(basis.electrode_count()));
    const auto& g = basis.grid();
    const auto start = well_analysis(superpose(basis, w.steps.front(), solver.stray_field),
                                     species, g.front(), g.back());
    meta.push_back({"model", "full"});
    tr = integrate_full(basis, w, species, {start.z_min, 0.0, w.t0}, dt_int, {stride},
                        solver.stray_field);
  } else if (model == "harmonic" || model == "continuous") {
    const auto ramp = ramp_from(cfg);
    meta.push_back({"model", model});
    meta.push_back({"tau", num(ramp.tau())});
    meta.push_back({"sigma", num(ramp.sigma)});
    IntegrationOptions opt;
    opt.record_stride = stride;
    tr = integrate_harmonic(ramp, species, {0.0, 0.0, 0.0}, dt_int, model == "harmonic", opt);
    if (model == "continuous")
      meta.push_back({"fourier_energy_meV", num(fourier_energy_oracle(ramp, species) * 1e3)});
  } else {
    throw InvalidInput("--model must be harmonic, continuous or full");
  }
  const auto s = summarize(tr);
  meta.push_back({"e_final_meV", num(s.e_final * 1e3)});
  meta.push_back({"e_max_meV", num(s.e_max * 1e3)});
  meta.push_back({"excursion_um", num(s.max_excursion * 1e6)});
  meta.push_back({"lost", s.lost ? "true" : "false"});
  emit(run, common.out, [&](std::ostream& os) { io::write_trajectory(os, tr, meta); });
  write_manifest(run, common.out);
  return kOk;
}

// --- sweeps

int cmd_sweep_tau(const Common& common, const std::string& taus, std::optional<long long> trials,
                  std::optional<double> background, const std::vector<std::string>& records,
                  unsigned jobs) {
  Run run = prepare("sweep-tau", common);
  auto& cfg = run.config;
  if (background) cfg.set("sequence.background_loss", num(*background));
  if (!cfg.has("sequence.background_loss"))
    throw InvalidInput("background loss is required: set sequence.background_loss or pass "
                       "--background-loss");
  const double b = cfg.number("sequence.background_loss");
  if (trials) cfg.set("sequence.trials", std::to_string(*trials));
  std::vector<TauSweepRow> rows;
  if (!records.empty()) {
    for (const auto& path : records) {
      auto is = io::open_input(path);
      auto rec = io::read_success_record(is);
      rec.background_loss = b;
      TauSweepRow row;
      row.tau = rec.tau;
      row.success = estimate_success(rec);
      row.e_final = row.e_max = row.max_excursion = std::numeric_limits<double>::quiet_NaN();
      rows.push_back(row);
    }
  } else {
    if (taus.empty()) throw InvalidInput("--tau is required unless --record is given");
    const auto species = species_from(cfg);
    const auto geometry = geometry_from(cfg);
    const auto basis = basis_from(cfg, geometry);
    const long long n = cfg.integer("sequence.trials");
    if (n < 1) throw InvalidInput("sequence.trials must be at least 1");
    rows = sweep_tau(basis, geometry, sequence_from(cfg), parse_value_list(taus),
                     static_cast<std::size_t>(n), b, jobs, species);
  }
  auto meta = run.meta();
  meta.push_back({"trials", cfg.text("sequence.trials")});
  meta.push_back({"background_loss", num(b)});
  meta.push_back({"loss_threshold", cfg.text("sequence.loss_threshold")});
  emit(run, common.out, [&](std::ostream& os) { io::write_tau_sweep(os, rows, meta); });
  write_manifest(run, common.out);
  return kOk;
}

int cmd_sweep_sigma(const Common& common, const std::string& sigmas, std::optional<double> tau,
                    long long trials, unsigned jobs) {
  Run run = prepare("sweep-sigma", common);
  auto& cfg = run.config;
  if (tau) cfg.set("ramp.tau", num(*tau));
  if (trials < 1) throw InvalidInput("--trials must be at least 1");
  const auto species = species_from(cfg);
  const auto geometry = geometry_from(cfg);
  const auto basis = basis_from(cfg, geometry);
  const auto rows = sweep_sigma(basis, geometry, sequence_from(cfg), parse_value_list(sigmas),
                                cfg.number("ramp.tau"), static_cast<std::size_t>(trials), jobs,
                                species);
  auto meta = run.meta();
  meta.push_back({"tau", cfg.text("ramp.tau")});
  meta.push_back({"model", cfg.text("sequence.model")});
  meta.push_back({"argmin_sigma", num(argmin_sigma(rows))});
  emit(run, common.out, [&](std::ostream& os) { io::write_sigma_sweep(os, rows, meta); });
  write_manifest(run, common.out);
  return kOk;
}

// --- micromotion

int cmd_fit_micromotion(const Common& common, const std::string& scan_file,
                        const std::vector<std::string>& histograms, bool simulate) {
  Run run = prepare("fit-micromotion", common);
  const auto& cfg = run.config;
  const double ref = cfg.number("micromotion.reference_phase_rad");
  const int sources = (scan_file.empty() ? 0 : 1) + (histograms.empty() ? 0 : 1) + (simulate ? 1 : 0);
  if (sources != 1)
    throw InvalidInput("give exactly one of --scan, --histogram or --simulate");
  CompensationScan scan;
  if (!scan_file.empty()) {
    auto is = io::open_input(scan_file);
    scan = io::read_scan(is);
  } else if (!histograms.empty()) {
    for (const auto& item : histograms) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw InvalidInput("--histogram expects VOLTS:FILE, got '" + item + "'");
      const double v = io::parse_double(item.substr(0, colon), 0);
      auto is = io::open_input(item.substr(colon + 1));
      scan.points.push_back({v, fit_sine(io::read_histogram(is), ref)});
    }
  } else {
    scan = simulate_scan(scan_simulation_from(cfg), run.seed());
  }
  const auto opt = find_optimum(scan);
  auto meta = run.meta();
  meta.push_back({"v_opt_V", num(opt.v_opt)});
  meta.push_back({"v_sigma_V", num(opt.v_sigma)});
  meta.push_back({"slope_per_V", num(opt.slope)});
  if (opt.warning) meta.push_back({"warning", *opt.warning});
  emit(run, common.out, [&](std::ostream& os) { io::write_scan(os, scan, meta); });
  if (opt.warning) std::cerr << "warning: " << *opt.warning << '\n';
  write_manifest(run, common.out);
  return kOk;
}

// --- recover-energy

int cmd_recover_energy(const Common& common, const std::string& trace_file,
                       std::optional<double> simulate_mev, const std::string& trace_out,
                       bool shot_noise, std::size_t rebin_factor) {
  Run run = prepare("recover-energy", common);
  const auto& cfg = run.config;
  const auto species = species_from(cfg);
  const auto laser = laser_from(cfg);
  const double omega = kTwoPi * cfg.number("trace.trap_freq_khz") * 1e3;
  if (trace_file.empty() == !simulate_mev)
    throw InvalidInput("give exactly one of --trace or --simulate-mev");
  FluorescenceTrace trace;
  auto meta = run.meta();
  if (!trace_file.empty()) {
    auto is = io::open_input(trace_file);
    trace = io::read_trace(is);
    meta.push_back({"trace", trace_file});
  } else {
    RecoveryOptions ro;
    if (shot_noise) ro.shot_noise_seed = run.seed();
    trace = simulate_recovery(*simulate_mev * 1e-3, laser, omega, species,
                              cfg.number("trace.duration_ms") * 1e-3,
                              cfg.number("trace.bin_us") * 1e-6, ro);
    meta.push_back({"planted_e0_meV", num(*simulate_mev)});
    if (!trace_out.empty())
      emit(run, trace_out, [&](std::ostream& os) { io::write_trace(os, trace, run.meta()); });
  }
  if (rebin_factor > 1) {
    trace = rebin(trace, rebin_factor);
    meta.push_back({"rebin", std::to_string(rebin_factor)});
  }
  const auto est = estimate_energy(trace, laser, omega, species, estimator_from(cfg));
  emit(run, common.out, [&](std::ostream& os) {
    io::write_header(os, "energy-estimate v1", meta, "quantity, value");
    table_row(os, "t_recover_ms", trace.t_recover.value_or(0.0) * 1e3);
    table_row(os, "steady_state_rate", trace.steady_state_rate);
    table_row(os, "e0_meV", est.e0 * 1e3);
    table_row(os, "uncertainty_meV", est.uncertainty * 1e3);
    table_row(os, "waist_term_meV", est.waist_term * 1e3);
    table_row(os, "saturation_term_meV", est.saturation_term * 1e3);
    table_row(os, "detuning_term_meV", est.detuning_term * 1e3);
  });
  write_manifest(run, common.out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ion transport simulator and waveform toolkit for segmented Paul traps"};
  app.set_version_flag("--version", PCBTRAP_VERSION);
  app.require_subcommand(1);

  Common common;
  std::string voltages;
  auto* characterize = app.add_subcommand("characterize", "radial, axial and crystal parameters");
  add_common(characterize, common);
  characterize->add_option("--voltages", voltages,
                           "comma-separated electrode voltages to characterize instead of the "
                           "transport and loading wells");

  auto* waveform = app.add_subcommand("waveform", "synthesize the transport voltage waveform");
  add_common(waveform, common);

  std::string waveform_file, model = "harmonic";
  std::size_t stride = 10;
  auto* transport = app.add_subcommand("transport", "integrate one transport");
  add_common(transport, common);
  transport->add_option("--waveform", waveform_file, "replay a waveform file in the full model");
  transport->add_option("--model", model, "harmonic | continuous | full")
      ->capture_default_str();
  transport->add_option("--stride", stride, "record every n-th integration step")
      ->capture_default_str();

  std::string taus;
  std::optional<long long> trials;
  std::optional<double> background;
  std::vector<std::string> records;
  unsigned jobs = 1;
  auto* sweep_t = app.add_subcommand("sweep-tau", "success probability and energy versus tau");
  add_common(sweep_t, common);
  sweep_t->add_option("--tau", taus, "values: a,b,c or start:step:stop");
  sweep_t->add_option("--trials", trials, "attempts per point");
  sweep_t->add_option("--background-loss", background, "per-attempt loss without transport");
  sweep_t->add_option("--record", records, "analyze success-record files instead of simulating");
  sweep_t->add_option("-j,--jobs", jobs, "parallel trials")->capture_default_str();

  std::string sigmas;
  std::optional<double> sigma_tau;
  long long sigma_trials = 1;
  auto* sweep_s = app.add_subcommand("sweep-sigma", "final energy versus ramp sigma");
  add_common(sweep_s, common);
  sweep_s->add_option("--sigma", sigmas, "values: a,b,c or start:step:stop")->required();
  sweep_s->add_option("--tau", sigma_tau, "transport duration in secular periods");
  sweep_s->add_option("--trials", sigma_trials, "trials per point")->capture_default_str();
  sweep_s->add_option("-j,--jobs", jobs, "parallel trials")->capture_default_str();

  std::string scan_file;
  std::vector<std::string> histograms;
  bool simulate = false;
  auto* fit = app.add_subcommand("fit-micromotion", "optimal compensation voltage");
  add_common(fit, common);
  fit->add_option("--scan", scan_file, "scan file: voltage_V, amplitude, amplitude_sigma");
  fit->add_option("--histogram", histograms, "VOLTS:FILE phase histogram (repeatable)");
  fit->add_flag("--simulate", simulate, "synthetic scan from the configuration");

  std::string trace_file, trace_out;
  std::optional<double> simulate_mev;
  bool shot_noise = false;
  std::size_t rebin_factor = 1;
  auto* recover = app.add_subcommand("recover-energy", "motional energy from fluorescence recovery");
  add_common(recover, common);
  recover->add_option("--trace", trace_file, "trace file: t_ms, detected_counts_per_s");
  recover->add_option("--simulate-mev", simulate_mev, "simulate a trace with this initial energy");
  recover->add_option("--trace-out", trace_out, "write the simulated trace");
  recover->add_flag("--shot-noise", shot_noise, "Poisson counts in the simulated trace");
  recover->add_option("--rebin", rebin_factor, "merge this many adjacent bins before estimating")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  try {
    if (*characterize) return cmd_characterize(common, voltages);
    if (*waveform) return cmd_waveform(common);
    if (*transport) return cmd_transport(common, waveform_file, model, stride);
    if (*sweep_t) return cmd_sweep_tau(common, taus, trials, background, records, jobs);
    if (*sweep_s) return cmd_sweep_sigma(common, sigmas, sigma_tau, sigma_trials, jobs);
    if (*fit) return cmd_fit_micromotion(common, scan_file, histograms, simulate);
    if (*recover) return cmd_recover_energy(common, trace_file, simulate_mev, trace_out, shot_noise,
                                                rebin_factor);
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kInfeasible;
  } catch (const NoWellError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kInfeasible;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const InvalidInput& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const EstimationError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
