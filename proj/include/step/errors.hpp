#pragma once

#include <stdexcept>
#include <string>

namespace step {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Chart boundary of the SO(3) logarithm: rotation angle within 1e-6 of pi.
struct NearPiAngle : Error {
  using Error::Error;
};

struct NonSkewInput : Error {
  using Error::Error;
};

struct NonPositiveDt : Error {
  using Error::Error;
};

struct DimensionMismatch : Error {
  using Error::Error;
};

// Projected landmark depth <= 1e-3 m; the factor is skipped and flagged.
struct BehindCamera : Error {
  using Error::Error;
};

struct NonMonotonicTime : Error {
  using Error::Error;
};

struct SolverFailure : Error {
  using Error::Error;
};

struct UnreachableFootTarget : Error {
  using Error::Error;
};

struct IkSingular : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct VersionMismatch : Error {
  using Error::Error;
};

struct NoOverlap : Error {
  using Error::Error;
};

struct InsufficientLength : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace step
