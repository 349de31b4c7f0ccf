#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gqvae {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad hyperparameters, invalid regex patterns, malformed config files.
/// The CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Corpus could not be read or produced no usable text.
class IngestError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TokenizerError : public Error {
 public:
  using Error::Error;
};

/// A metric whose denominator is empty (e.g. bytes/token on an empty corpus).
class MetricError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace gqvae
