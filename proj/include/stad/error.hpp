#pragma once

#include <stdexcept>
#include <string>

namespace stad {

/// Process exit codes used by the command-line tools.
enum class ExitCode : int {
    kOk = 0,
    kValidation = 2,
    kNumerical = 3,
    kIo = 4,
};

class Error : public std::runtime_error {
  public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

  private:
    ExitCode code_;
};

class ValidationError : public Error {
  public:
    explicit ValidationError(const std::string& what) : Error(ExitCode::kValidation, what) {}
};

/// Shape or rank mismatch between operands.
class DimensionError : public ValidationError {
  public:
    explicit DimensionError(const std::string& what) : ValidationError(what) {}
};

class NumericalError : public Error {
  public:
    explicit NumericalError(const std::string& what) : Error(ExitCode::kNumerical, what) {}
};

class IoError : public Error {
  public:
    explicit IoError(const std::string& what) : Error(ExitCode::kIo, what) {}
};

}  // namespace stad
