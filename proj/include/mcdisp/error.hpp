#pragma once

#include <stdexcept>
#include <string>

namespace mcdisp {

/// Non-finite or out-of-domain numeric input to a mathematical function.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller violated a shape or ordering precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Calibration data is missing, degenerate or too small.
class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Template energy rule produced a window too short for the profile fit.
class WindowError : public CalibrationError {
 public:
  using CalibrationError::CalibrationError;
};

/// Malformed configuration text or unknown key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace mcdisp
