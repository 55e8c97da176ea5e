#include "tiltlab/errors.hpp"

namespace tiltlab {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::SupportViolation: return "SupportViolation";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidPath: return "InvalidPath";
    case ErrorCode::ZeroProbability: return "ZeroProbability";
    case ErrorCode::ModelMismatch: return "ModelMismatch";
    case ErrorCode::CorruptStream: return "CorruptStream";
    case ErrorCode::AlphaOutOfRange: return "AlphaOutOfRange";
    case ErrorCode::LambdaOutOfRange: return "LambdaOutOfRange";
    case ErrorCode::DegenerateDirection: return "DegenerateDirection";
    case ErrorCode::NonpositiveTau: return "NonpositiveTau";
    case ErrorCode::NanInput: return "NanInput";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::InfeasibleParams: return "InfeasibleParams";
    case ErrorCode::ConstantsMissing: return "ConstantsMissing";
    case ErrorCode::InsufficientRuns: return "InsufficientRuns";
    case ErrorCode::InfeasibleT: return "InfeasibleT";
    case ErrorCode::NonpositiveInput: return "NonpositiveInput";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace tiltlab
