#pragma once

// Plain-text table formats: '#'-prefixed metadata lines followed by
// comma-separated rows.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pcbtrap/cooling.hpp"
#include "pcbtrap/dynamics.hpp"
#include "pcbtrap/errors.hpp"
#include "pcbtrap/experiment.hpp"
#include "pcbtrap/micromotion.hpp"
#include "pcbtrap/trap_model.hpp"
#include "pcbtrap/waveform.hpp"

namespace pcbtrap::io {

/// 17 significant digits; round-trips every double.
inline std::string num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

using Metadata = std::vector<std::pair<std::string, std::string>>;

struct Table {
  std::map<std::string, std::string> meta;
  std::string first_comment;
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> lines;  // source line of each row
  std::vector<std::vector<std::string>> raw;
};

inline void write_header(std::ostream& os, const std::string& title, const Metadata& meta,
                         const std::string& columns) {
  os << "# " << title << '\n';
  for (const auto& [k, v] : meta) os << "# " << k << '=' << v << '\n';
  os << "# columns: " << columns << '\n';
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& text, std::size_t line) {
  const std::string t = trim(text);
  if (t == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(t, &pos);
  } catch (const std::exception&) {
    throw ParseError("not a number: '" + t + "'", static_cast<long>(line));
  }
  if (pos != t.size()) throw ParseError("not a number: '" + t + "'", static_cast<long>(line));
  return v;
}

/// Reads a table; `min_columns`/`max_columns` bound the row width. Metadata
/// lines of the form "# key=value" are collected.
inline Table read_table(std::istream& is, std::size_t min_columns, std::size_t max_columns,
                        bool keep_raw = false) {
  Table t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const std::string s = trim(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      const std::string body = trim(s.substr(1));
      if (t.first_comment.empty() && t.rows.empty() && t.meta.empty()) t.first_comment = body;
      const auto eq = body.find('=');
      if (eq != std::string::npos && body.find(' ') > eq)
        t.meta[trim(body.substr(0, eq))] = trim(body.substr(eq + 1));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (cells.size() < min_columns || cells.size() > max_columns)
      throw ParseError("expected " + std::to_string(min_columns) +
                           (max_columns != min_columns ? "+" : "") + " columns, found " +
                           std::to_string(cells.size()),
                       static_cast<long>(n));
    if (keep_raw) {
      t.raw.push_back(cells);
    } else {
      std::vector<double> row;
      for (const auto& c : cells) row.push_back(parse_double(c, n));
      t.rows.push_back(std::move(row));
    }
    t.lines.push_back(n);
  }
  return t;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open '" + path + "'");
  return is;
}

// --- axial basis: "# axial-basis v1 electrodes=N", rows z_m, phi_1..phi_N

inline void write_basis(std::ostream& os, const AxialBasis& b, const Metadata& meta = {}) {
  Metadata m = meta;
  m.insert(m.begin(), {"electrodes", std::to_string(b.electrode_count())});
  std::string cols = "z_m";
  for (std::size_t i = 1; i <= b.electrode_count(); ++i) cols += ", phi_" + std::to_string(i);
  write_header(os, "axial-basis v1", m, cols);
  const auto& g = b.grid();
  for (std::size_t j = 0; j < g.size(); ++j) {
    os << num(g[j]);
    for (std::size_t i = 0; i < b.electrode_count(); ++i)
      os << ", " << num(b.phi()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    os << '\n';
  }
}

inline AxialBasis read_basis(std::istream& is) {
  const auto t = read_table(is, 2, 1000);
  if (t.rows.size() < 3) throw ParseError("basis needs at least three grid points", 0);
  const std::size_t ne = t.rows.front().size() - 1;
  if (auto it = t.meta.find("electrodes"); it != t.meta.end() && std::stoul(it->second) != ne)
    throw ParseError("electrode count does not match the header", static_cast<long>(t.lines[0]));
  std::vector<double> z;
  Eigen::MatrixXd phi(static_cast<Eigen::Index>(ne), static_cast<Eigen::Index>(t.rows.size()));
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    if (t.rows[j].size() != ne + 1)
      throw ParseError("ragged basis row", static_cast<long>(t.lines[j]));
    if (!z.empty() && !(t.rows[j][0] > z.back()))
      throw ParseError("grid positions must increase", static_cast<long>(t.lines[j]));
    z.push_back(t.rows[j][0]);
    for (std::size_t i = 0; i < ne; ++i)
      phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.rows[j][i + 1];
  }
  return AxialBasis::from_samples(Grid(std::move(z)), std::move(phi));
}

// --- waveform: "# waveform v1", rows t_us, U_1..U_N

inline void write_waveform(std::ostream& os, const VoltageWaveform& w, const Metadata& meta = {}) {
  Metadata m{{"electrodes", std::to_string(w.electrodes())},
             {"dt_us", num(w.dt * 1e6)},
             {"quantized", w.quantized ? "true" : "false"},
             {"dac_bits", std::to_string(w.dac_bits)},
             {"saturated", w.saturated ? "true" : "false"}};
  m.insert(m.end(), meta.begin(), meta.end());
  std::string cols = "t_us";
  for (std::size_t i = 1; i <= w.electrodes(); ++i) cols += ", U" + std::to_string(i) + "_V";
  write_header(os, "waveform v1", m, cols);
  for (std::size_t k = 0; k < w.rows(); ++k) {
    os << num(w.time(k) * 1e6);
    for (double u : w.steps[k]) os << ", " << num(u);
    os << '\n';
  }
}

inline VoltageWaveform read_waveform(std::istream& is) {
  const auto t = read_table(is, 2, 1000);
  if (t.rows.empty()) throw ParseError("waveform has no rows", 0);
  VoltageWaveform w;
  const std::size_t ne = t.rows.front().size() - 1;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    if (t.rows[k].size() != ne + 1)
      throw ParseError("ragged waveform row", static_cast<long>(t.lines[k]));
    w.steps.emplace_back(t.rows[k].begin() + 1, t.rows[k].end());
  }
  w.t0 = t.rows.front()[0] * 1e-6;
  if (auto it = t.meta.find("dt_us"); it != t.meta.end()) {
    w.dt = parse_double(it->second, 0) * 1e-6;
  } else if (t.rows.size() > 1) {
    w.dt = (t.rows[1][0] - t.rows[0][0]) * 1e-6;
  }
  if (!(w.dt > 0)) throw ParseError("waveform update interval must be positive", 0);
  for (std::size_t k = 1; k < t.rows.size(); ++k) {
    const double expect = (t.rows[0][0] * 1e-6 + static_cast<double>(k) * w.dt) * 1e6;
    if (std::abs(t.rows[k][0] - expect) > 1e-6 * std::max(1.0, std::abs(expect)))
      throw ParseError("waveform rows are not uniformly spaced", static_cast<long>(t.lines[k]));
  }
  if (auto it = t.meta.find("quantized"); it != t.meta.end()) w.quantized = it->second == "true";
  if (auto it = t.meta.find("dac_bits"); it != t.meta.end()) w.dac_bits = std::stoi(it->second);
  return w;
}

// --- trajectory: rows t_us, z_um, v_m_per_s, e_meV

inline void write_trajectory(std::ostream& os, const Trajectory& tr, const Metadata& meta = {}) {
  write_header(os, "trajectory v1", meta, "t_us, z_um, v_m_per_s, e_meV");
  for (std::size_t i = 0; i < tr.samples.size(); ++i) {
    const auto& s = tr.samples[i];
    os << num(s.t * 1e6) << ", " << num(s.z * 1e6) << ", " << num(s.v) << ", "
       << num(to_ev(tr.energy[i]) * 1e3) << '\n';
  }
}

// --- fluorescence trace: rows t_ms, detected_counts_per_s (bin centres)

inline void write_trace(std::ostream& os, const FluorescenceTrace& tr, const Metadata& meta = {}) {
  Metadata m{{"bin_ms", num(tr.bin * 1e3)}, {"steady_state_rate", num(tr.steady_state_rate)}};
  m.insert(m.end(), meta.begin(), meta.end());
  write_header(os, "fluorescence-trace v1", m, "t_ms, detected_counts_per_s");
  for (std::size_t j = 0; j < tr.rate.size(); ++j)
    os << num(tr.time(j) * 1e3) << ", " << num(tr.rate[j]) << '\n';
}

/// Reads a trace; the steady-state rate comes from the header when present
/// and otherwise from the mean of the final 10 % of bins.
inline FluorescenceTrace read_trace(std::istream& is) {
  const auto t = read_table(is, 2, 2);
  if (t.rows.size() < 2) throw ParseError("trace needs at least two bins", 0);
  FluorescenceTrace tr;
  tr.bin = (t.rows[1][0] - t.rows[0][0]) * 1e-3;
  if (!(tr.bin > 0)) throw ParseError("trace times must increase", static_cast<long>(t.lines[1]));
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    const double expect = (static_cast<double>(j) + 0.5) * tr.bin * 1e3;
    if (std::abs(t.rows[j][0] - expect) > 1e-6 * tr.bin * 1e3)
      throw ParseError("trace bins must be uniform and start at half a bin",
                       static_cast<long>(t.lines[j]));
    if (!(t.rows[j][1] >= 0)) throw ParseError("negative count rate", static_cast<long>(t.lines[j]));
    tr.rate.push_back(t.rows[j][1]);
  }
  if (auto it = t.meta.find("steady_state_rate"); it != t.meta.end())
    tr.steady_state_rate = parse_double(it->second, 0);
  else
    tr.steady_state_rate = tail_mean(tr.rate);
  tr.t_recover = recovery_crossing(tr.rate, tr.bin, tr.steady_state_rate);
  return tr;
}

// --- phase histogram: rows phase_bin_index, counts

inline void write_histogram(std::ostream& os, const PhaseHistogram& h, const Metadata& meta = {}) {
  Metadata m{{"fold", h.fold == FoldMode::full_period ? "full" : "double"}};
  m.insert(m.end(), meta.begin(), meta.end());
  write_header(os, "phase-histogram v1", m, "phase_bin_index, counts");
  for (std::size_t j = 0; j < h.bins(); ++j) os << j << ", " << num(h.counts[j]) << '\n';
}

inline PhaseHistogram read_histogram(std::istream& is) {
  const auto t = read_table(is, 2, 2);
  PhaseHistogram h;
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    if (t.rows[j][0] != static_cast<double>(j))
      throw ParseError("phase bins must be numbered 0, 1, 2, ...", static_cast<long>(t.lines[j]));
    if (!(t.rows[j][1] >= 0)) throw ParseError("negative count", static_cast<long>(t.lines[j]));
    h.counts.push_back(t.rows[j][1]);
  }
  if (auto it = t.meta.find("fold"); it != t.meta.end()) {
    if (it->second == "double")
      h.fold = FoldMode::double_period;
    else if (it->second != "full")
      throw ParseError("unknown fold mode '" + it->second + "'", 0);
  }
  if (h.bins() < kMinPhaseBins) throw ParseError("histogram needs at least 8 bins", 0);
  return h;
}

// --- compensation scan: rows voltage_V, amplitude, amplitude_sigma

inline void write_scan(std::ostream& os, const CompensationScan& scan, const Metadata& meta = {}) {
  write_header(os, "compensation-scan v1", meta, "voltage_V, amplitude, amplitude_sigma");
  for (const auto& p : scan.points)
    os << num(p.voltage) << ", " << num(p.fit.amplitude) << ", " << num(p.fit.amplitude_sigma)
       << '\n';
}

inline CompensationScan read_scan(std::istream& is) {
  const auto t = read_table(is, 3, 3);
  CompensationScan scan;
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    if (!(t.rows[j][2] >= 0))
      throw ParseError("amplitude sigma must be non-negative", static_cast<long>(t.lines[j]));
    SineFit f;
    f.amplitude = t.rows[j][1];
    f.amplitude_sigma = t.rows[j][2];
    scan.points.push_back({t.rows[j][0], f});
  }
  return scan;
}

// --- success record: one n_i per line; a trailing '+' marks a censored run

inline void write_success_record(std::ostream& os, const SuccessRecord& rec,
                                 const Metadata& meta = {}) {
  Metadata m{{"tau", num(rec.tau)}, {"background_loss", num(rec.background_loss)}};
  m.insert(m.end(), meta.begin(), meta.end());
  write_header(os, "success-record v1", m, "n_i");
  for (std::size_t i = 0; i < rec.n_list.size(); ++i)
    os << rec.n_list[i] << (rec.is_censored(i) ? "+" : "") << '\n';
}

inline SuccessRecord read_success_record(std::istream& is) {
  const auto t = read_table(is, 1, 1, true);
  SuccessRecord rec;
  for (std::size_t j = 0; j < t.raw.size(); ++j) {
    std::string s = t.raw[j][0];
    const bool censored = !s.empty() && s.back() == '+';
    if (censored) s.pop_back();
    std::size_t pos = 0;
    long long n = -1;
    try {
      n = std::stoll(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty() || n < 0)
      throw ParseError("expected a non-negative integer count", static_cast<long>(t.lines[j]));
    rec.n_list.push_back(n);
    rec.censored.push_back(censored);
  }
  if (rec.n_list.empty()) throw ParseError("success record is empty", 0);
  if (auto it = t.meta.find("tau"); it != t.meta.end()) rec.tau = parse_double(it->second, 0);
  if (auto it = t.meta.find("background_loss"); it != t.meta.end())
    rec.background_loss = parse_double(it->second, 0);
  return rec;
}

// --- sweeps

inline void write_tau_sweep(std::ostream& os, const std::vector<TauSweepRow>& rows,
                            const Metadata& meta = {}) {
  write_header(os, "tau-sweep v1", meta,
               "tau, p_net, p_lo, p_hi, e_final_meV, e_max_meV, excursion_um");
  for (const auto& r : rows)
    os << num(r.tau) << ", " << num(r.success.p_net) << ", " << num(r.success.p_net_lo) << ", "
       << num(r.success.p_net_hi) << ", " << num(r.e_final * 1e3) << ", " << num(r.e_max * 1e3)
       << ", " << num(r.max_excursion * 1e6) << '\n';
}

inline void write_sigma_sweep(std::ostream& os, const std::vector<SigmaSweepRow>& rows,
                              const Metadata& meta = {}) {
  write_header(os, "sigma-sweep v1", meta, "sigma, e_final_meV, e_max_meV");
  for (const auto& r : rows)
    os << num(r.sigma) << ", " << num(r.e_final * 1e3) << ", " << num(r.e_max * 1e3) << '\n';
}

}  // namespace pcbtrap::io
