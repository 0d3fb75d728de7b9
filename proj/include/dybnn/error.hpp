#pragma once

#include <stdexcept>
#include <string>

namespace dybnn {

// Base class for every error raised by the library. The exit_code() mapping
// is what the CLI returns to the shell: 1 usage, 2 data, 3 numeric fault.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class Unsupported : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class IngestionError : public DataError {
 public:
  using DataError::DataError;
};

class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class NumericFault : public Error {
 public:
  NumericFault(std::string layer, const std::string& what)
      : Error("numeric fault in layer '" + layer + "': " + what), layer_(std::move(layer)) {}
  int exit_code() const override { return 3; }
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

}  // namespace dybnn
