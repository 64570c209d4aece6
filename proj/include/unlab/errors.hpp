#pragma once

#include <stdexcept>
#include <string>

namespace unlab {

// Base class for every error raised by the library. Each subclass names the
// failure category so callers (and the CLI) can map it to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Text that cannot be represented in the closed vocabulary.
class EncodingError : public Error {
 public:
  using Error::Error;
};

// Tensor or sequence shape violations (e.g. sequence longer than context).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced during optimisation or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inputs that make a computation meaningless (empty batch, empty reference).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// A sample fed to an operation reserved for a different corpus split.
class SplitMisuseError : public Error {
 public:
  using Error::Error;
};

// Corpus pairs that cannot be audited against each other.
class AuditError : public Error {
 public:
  using Error::Error;
};

// Report aggregation over incompatible or missing inputs.
class ReportError : public Error {
 public:
  using Error::Error;
};

// Filesystem and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace unlab
