#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace patch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (targets, pattern ids, gather ids).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid scalar hyperparameter, e.g. a non-positive temperature.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Matrix extents not compatible with tile or group geometry.
class LayoutError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupted or truncated binary file. `offset` is the byte position where
// decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Loss became non-finite during optimization.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(long step)
      : Error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace patch
