#pragma once

#include <stdexcept>
#include <string>

namespace ddanet {

// Raised when a caller passes arguments that violate an operation's
// preconditions (shape mismatches, bad configuration values, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// File system and codec failures. The message always names the path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class CorruptCheckpoint : public std::runtime_error {
 public:
  CorruptCheckpoint(const std::string& field, const std::string& what)
      : std::runtime_error("corrupt checkpoint (" + field + "): " + what), field_(field) {}

  // First field of the file that failed validation.
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Numerical failure during optimisation, e.g. a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ddanet
