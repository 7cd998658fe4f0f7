#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace specseg {

enum class Errc {
  BadMagic,
  UnsupportedVersion,
  UnsupportedDtype,
  TruncatedPayload,
  NonFiniteValue,
  IoFailure,
  UnsupportedPng,
  InvalidArgument,
  ZeroNormPatch,
  ZeroNormPixel,
  EmptySubset,
  IndexOutOfRange,
  ConvergenceFailure,
  EmptySide,
  TooFewEigenvalues,
  SingularAnchors,
  KTooLarge,
  DimensionMismatch,
  NonFiniteCost,
  DegenerateLabels,
  MissingPair,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::UnsupportedDtype: return "UnsupportedDtype";
    case Errc::TruncatedPayload: return "TruncatedPayload";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::IoFailure: return "IoFailure";
    case Errc::UnsupportedPng: return "UnsupportedPng";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ZeroNormPatch: return "ZeroNormPatch";
    case Errc::ZeroNormPixel: return "ZeroNormPixel";
    case Errc::EmptySubset: return "EmptySubset";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::ConvergenceFailure: return "ConvergenceFailure";
    case Errc::EmptySide: return "EmptySide";
    case Errc::TooFewEigenvalues: return "TooFewEigenvalues";
    case Errc::SingularAnchors: return "SingularAnchors";
    case Errc::KTooLarge: return "KTooLarge";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NonFiniteCost: return "NonFiniteCost";
    case Errc::DegenerateLabels: return "DegenerateLabels";
    case Errc::MissingPair: return "MissingPair";
  }
  return "Unknown";
}

/// Every failure raised by the engine carries one of the codes above; the
/// message is prefixed with the code name so it survives a plain `what()`.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

  Errc code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

}  // namespace specseg
