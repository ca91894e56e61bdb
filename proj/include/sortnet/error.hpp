#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sortnet {

enum class ErrorKind {
  ShapeMismatch,
  InvalidGeometry,
  NegativeInput,
  LabelOutOfRange,
  NonFiniteLoss,
  NonFiniteGradient,
  EmptySpec,
  EvenKernel,
  EmptyGrid,
  DivergedLoss,
  EmptySplit,
  TruncatedFile,
  ZeroVariance,
  InvalidConfig,
  IoError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::InvalidGeometry: return "InvalidGeometry";
    case ErrorKind::NegativeInput: return "NegativeInput";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::EmptySpec: return "EmptySpec";
    case ErrorKind::EvenKernel: return "EvenKernel";
    case ErrorKind::EmptyGrid: return "EmptyGrid";
    case ErrorKind::DivergedLoss: return "DivergedLoss";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::ZeroVariance: return "ZeroVariance";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace sortnet
