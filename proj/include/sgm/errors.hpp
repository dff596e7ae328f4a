#pragma once

#include <stdexcept>
#include <string>

namespace sgm {

// Input violates a documented precondition (bad shapes, non-finite values,
// degenerate geometry, malformed configuration values).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not fit the operation.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A file was readable but its contents do not follow the expected layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CrcError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class SchemaError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace sgm
