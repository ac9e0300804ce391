#pragma once

#include <stdexcept>
#include <string>

namespace mp3d {

/// Tensor extents or ranks that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration values or combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed files (weight stores, datasets, CSVs).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weight store does not match a model.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mp3d
