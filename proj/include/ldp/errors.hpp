#pragma once

#include <stdexcept>
#include <string>

namespace ldp {

// Error classes map 1:1 onto CLI exit codes.
enum class ErrorClass : int {
    kConfig = 2,
    kData = 3,
    kNumeric = 4,
    kInternal = 5,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorClass cls, const std::string& msg) : std::runtime_error(msg), cls_(cls) {}
    ErrorClass error_class() const { return cls_; }

  private:
    ErrorClass cls_;
};

class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& msg) : Error(ErrorClass::kConfig, msg) {}
};

class DataError : public Error {
  public:
    explicit DataError(const std::string& msg) : Error(ErrorClass::kData, msg) {}
};

class NumericError : public Error {
  public:
    explicit NumericError(const std::string& msg) : Error(ErrorClass::kNumeric, msg) {}
};

// Violated internal contracts (shape mismatches between engine ops, misuse of
// the tape, double merge, ...). These indicate a bug in calling code.
class ContractError : public Error {
  public:
    explicit ContractError(const std::string& msg) : Error(ErrorClass::kInternal, msg) {}
};

class ShapeError : public ContractError {
  public:
    explicit ShapeError(const std::string& msg) : ContractError(msg) {}
};

}  // namespace ldp
