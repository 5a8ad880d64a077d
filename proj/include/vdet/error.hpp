#pragma once

#include <stdexcept>
#include <string>

namespace vdet {

// Root of all library errors. Subclasses mark the failure category so the
// CLI can map them onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or precondition violated by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API called in the wrong order (e.g. backward before forward).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Model file written by an incompatible container version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Stored checksum does not match the file contents.
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Model file holds a different detector than the one requested.
class MethodMismatchError : public Error {
 public:
  using Error::Error;
};

class DegenerateBoxError : public Error {
 public:
  using Error::Error;
};

class SingularSystemError : public Error {
 public:
  using Error::Error;
};

}  // namespace vdet
