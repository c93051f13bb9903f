#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rectconv {

enum class ErrorCode {
  InvalidArgument,
  OutOfDomain,
  NonConvergence,
  BehindCamera,
  OutOfBounds,
  ShapeMismatch,
  GeometryMismatch,
  Io,
  FormatVersionMismatch,
  ChecksumMismatch,
  Parse,
  UnknownKind,
  MissingWeight,
  ScaleConflict,
  CoverageGap,
  LabelOutOfRange,
  EmptyEvaluation,
  EmptyInput,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::OutOfDomain: return "OutOfDomain";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::GeometryMismatch: return "GeometryMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::Parse: return "Parse";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::MissingWeight: return "MissingWeight";
    case ErrorCode::ScaleConflict: return "ScaleConflict";
    case ErrorCode::CoverageGap: return "CoverageGap";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::EmptyInput: return "EmptyInput";
  }
  return "Unknown";
}

// Every failure in the library is reported through this type; callers branch
// on code() rather than on the message text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace rectconv
