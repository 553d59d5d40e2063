#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rehabridge {

/// Machine-readable error codes shared by every layer. The HTTP service maps
/// them onto status codes and the CLI onto exit codes.
enum class ErrorCode {
  BadLength,
  ModelFault,
  CalibrationTooNarrow,
  InsufficientSamples,
  InvalidProfile,
  PlanUnavailable,
  InvalidPlan,
  SessionClosed,
  SessionStillActive,
  OrderingError,
  StorageError,
  NotFound,
  IncompleteResponse,
  InvalidResponse,
  Unreconstructable,
  ConnectError,
  AlreadyConnected,
  NotConnected,
  IllegalState,
  ParseError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadLength: return "BadLength";
    case ErrorCode::ModelFault: return "ModelFault";
    case ErrorCode::CalibrationTooNarrow: return "CalibrationTooNarrow";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::InvalidProfile: return "InvalidProfile";
    case ErrorCode::PlanUnavailable: return "PlanUnavailable";
    case ErrorCode::InvalidPlan: return "InvalidPlan";
    case ErrorCode::SessionClosed: return "SessionClosed";
    case ErrorCode::SessionStillActive: return "SessionStillActive";
    case ErrorCode::OrderingError: return "OrderingError";
    case ErrorCode::StorageError: return "StorageError";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::IncompleteResponse: return "IncompleteResponse";
    case ErrorCode::InvalidResponse: return "InvalidResponse";
    case ErrorCode::Unreconstructable: return "Unreconstructable";
    case ErrorCode::ConnectError: return "ConnectError";
    case ErrorCode::AlreadyConnected: return "AlreadyConnected";
    case ErrorCode::NotConnected: return "NotConnected";
    case ErrorCode::IllegalState: return "IllegalState";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace rehabridge
