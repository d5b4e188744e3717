#pragma once

#include <stdexcept>
#include <string>

namespace uidkat {

/// Shape or argument contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A kernel or loss produced NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint directory could not be read back faithfully.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kCorruptManifest, kShapeMismatch, kTruncated, kMissing, kIo };

  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Input file or directory problem (missing, undecodable, empty).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace uidkat
