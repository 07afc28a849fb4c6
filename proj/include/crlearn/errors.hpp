#pragma once

// Exception hierarchy. Every throw site attaches enough context to act on
// (offending value, line number, query index) in the message text.

#include <stdexcept>
#include <string>

namespace crlearn {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid physical or numerical argument (out-of-range time, negative rate).
struct DomainError : Error {
  using Error::Error;
};

// Bad configuration file or inconsistent config values.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed dataset line; carries the 1-based line number.
struct ParseError : Error {
  ParseError(std::size_t line_no, const std::string& what)
      : Error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
  std::size_t line;
};

// Replay oracle ran out of recorded shots for a query.
struct ExhaustedQueryError : Error {
  using Error::Error;
};

// Constraint set of the design optimization is empty.
struct InfeasibleError : Error {
  using Error::Error;
};

// Linear algebra failure (singular system, non-finite objective).
struct NumericalError : Error {
  using Error::Error;
};

// Operation applied to the wrong variant of a model type.
struct ModelKindError : Error {
  using Error::Error;
};

// Operation not supported under the configured policy (e.g. growing a
// fixed query space).
struct PolicyError : Error {
  using Error::Error;
};

// Argument outside the representable range of a curve or window.
struct RangeError : Error {
  using Error::Error;
};

// Batch sampler cannot place the requested number of shots.
struct BudgetExhaustedError : Error {
  using Error::Error;
};

// A Rabi curve has no usable data points.
struct MissingDataError : Error {
  using Error::Error;
};

// Oscillation amplitude too small to locate a frequency.
struct WeakSignalError : Error {
  using Error::Error;
};

// Coordinate map undefined at this point (omega = 0 or beta = 0).
struct SingularityError : Error {
  using Error::Error;
};

// Post-processing cannot proceed (missing scenario, too few points).
struct AnalysisError : Error {
  using Error::Error;
};

}  // namespace crlearn
