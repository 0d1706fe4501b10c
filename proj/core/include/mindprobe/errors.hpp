#pragma once

#include <stdexcept>
#include <string>

namespace mindprobe {

// Broad failure classes; the CLI maps these onto exit codes.
enum class ErrorKind {
  config,        // invalid configuration or arguments
  format,        // malformed or truncated file
  shape,         // tensor shape disagrees with its declaration
  data,          // semantically invalid input data
  numeric,       // non-finite values, divergence
  prerequisite,  // a pipeline artifact is missing
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Raised when a column/field required by an input file is absent.
class MissingFieldError : public DataError {
 public:
  explicit MissingFieldError(std::string field)
      : DataError("missing required column '" + field + "'"), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class PrerequisiteError : public Error {
 public:
  PrerequisiteError(std::string stage, const std::string& what)
      : Error(ErrorKind::prerequisite, what), stage_(std::move(stage)) {}
  /// Name of the stage that has to run first.
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace mindprobe
