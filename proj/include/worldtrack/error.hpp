#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace worldtrack {

enum class ErrorCode {
  InvalidArgument,
  BranchMismatch,
  NonPositiveDepth,
  EmptyVideo,
  QueryOutOfBounds,
  InsufficientValidPoints,
  DegenerateGeometry,
  TooFewCorrespondences,
  NoConsensus,
  SingularNormalEquations,
  AllOccluded,
  DegenerateRadius,
  NoOverlap,
  NonPositiveProjectedDepth,
  EmptyMask,
  DivergenceDetected,
  UnknownPreset,
  EmptyRaster,
  ZeroMedian,
  DegenerateCovariance,
  ShapeMismatch,
  EmptyDynamicSubset,
  Io,
  Format,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::BranchMismatch: return "BranchMismatch";
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::EmptyVideo: return "EmptyVideo";
    case ErrorCode::QueryOutOfBounds: return "QueryOutOfBounds";
    case ErrorCode::InsufficientValidPoints: return "InsufficientValidPoints";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::TooFewCorrespondences: return "TooFewCorrespondences";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::SingularNormalEquations: return "SingularNormalEquations";
    case ErrorCode::AllOccluded: return "AllOccluded";
    case ErrorCode::DegenerateRadius: return "DegenerateRadius";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::NonPositiveProjectedDepth: return "NonPositiveProjectedDepth";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::UnknownPreset: return "UnknownPreset";
    case ErrorCode::EmptyRaster: return "EmptyRaster";
    case ErrorCode::ZeroMedian: return "ZeroMedian";
    case ErrorCode::DegenerateCovariance: return "DegenerateCovariance";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyDynamicSubset: return "EmptyDynamicSubset";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Format: return "Format";
  }
  return "Unknown";
}

/// Every failure raised by the library. Carries a machine-readable code and,
/// for per-frame pipelines, the index of the frame that failed.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::optional<int> frame = std::nullopt)
      : std::runtime_error(format(code, message, frame)),
        code_(code),
        message_(message),
        frame_(frame) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<int> frame() const noexcept { return frame_; }
  const std::string& message() const noexcept { return message_; }

  Error at_frame(int frame) const { return Error(code_, message_, frame); }

 private:
  static std::string format(ErrorCode code, const std::string& message, std::optional<int> frame) {
    std::string out = to_string(code);
    if (frame) out += " (frame " + std::to_string(*frame) + ")";
    if (!message.empty()) out += ": " + message;
    return out;
  }

  ErrorCode code_;
  std::string message_;
  std::optional<int> frame_;
};

}  // namespace worldtrack
