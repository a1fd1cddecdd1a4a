#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pcbtrap {

/// Violated precondition on a caller-supplied argument.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed text file; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// No interior potential minimum inside the requested search window.
class NoWellError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Voltage synthesis could not meet its well tolerance within the voltage bounds.
class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& what, double achieved_omega,
                  double achieved_z_min, long time_index = -1)
      : std::runtime_error(what),
        achieved_omega(achieved_omega),
        achieved_z_min(achieved_z_min),
        time_index(time_index) {}
  double achieved_omega;
  double achieved_z_min;
  long time_index;
};

class IntegrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pcbtrap
