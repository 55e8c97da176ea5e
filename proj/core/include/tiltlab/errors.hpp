#pragma once

#include <stdexcept>
#include <string>

namespace tiltlab {

// Machine-readable failure codes. The CLI prints them as
// "ERROR <code>: <message>" on stderr.
enum class ErrorCode {
  ShapeMismatch,
  BudgetExceeded,
  SupportViolation,
  EmptyInput,
  InvalidPath,
  ZeroProbability,
  ModelMismatch,
  CorruptStream,
  AlphaOutOfRange,
  LambdaOutOfRange,
  DegenerateDirection,
  NonpositiveTau,
  NanInput,
  EmptyBatch,
  ConvergenceFailure,
  InfeasibleParams,
  ConstantsMissing,
  InsufficientRuns,
  InfeasibleT,
  NonpositiveInput,
  InvalidConfig,
  IoError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const { return code_; }
  const std::string& message() const { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace tiltlab
