#pragma once

#include <stdexcept>
#include <string>

namespace slr {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid parameters or configuration (bad threshold, unknown config key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operand shapes that do not conform.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Convolution geometry inconsistent with its input.
class GeometryError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Solver failures: non-finite iterates, SVD non-convergence, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (cannot open, short write, ...).
class IoError : public Error {
 public:
  using Error::Error;
};

/// File content that cannot be parsed (bad magic, truncated payload, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Array file whose dtype or rank is not what the caller asked for.
class DtypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Container checksum mismatch.
class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Container written by a different format version.
class VersionError : public FormatError {
 public:
  VersionError(unsigned found, unsigned supported)
      : FormatError("format version mismatch: file has version " + std::to_string(found) +
                    ", this build reads version " + std::to_string(supported)),
        found_(found),
        supported_(supported) {}

  unsigned found() const { return found_; }
  unsigned supported() const { return supported_; }

 private:
  unsigned found_;
  unsigned supported_;
};

/// Compressed forward pass disagrees with the dense reference.
class CorrectnessError : public Error {
 public:
  using Error::Error;
};

}  // namespace slr
