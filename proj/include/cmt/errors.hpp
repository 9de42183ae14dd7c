#pragma once

#include <stdexcept>
#include <string>

namespace cmt {

/// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration that cannot produce a well-formed result (stride/padding,
/// model spec invariants, resolution rules).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerically invalid parameter (e.g. negative running variance).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Relative-bias geometry does not match the input; call transfer_resolution.
class ResolutionMismatch : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

/// Base for everything the CMTW reader can reject.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmt
