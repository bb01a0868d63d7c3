#pragma once

#include <stdexcept>
#include <string>

namespace t2t {

enum class ErrorKind {
  MalformedPcap,
  InvalidConfig,
  EmptyFlowInWindow,
  ShapeMismatch,
  IndexOutOfRange,
  AllMasked,
  EmptyGold,
  LabelOutOfRange,
  LengthMismatch,
  NonFiniteLoss,
  EmptyDataset,
  ProviderAuthError,
  ProviderTimeout,
  ProviderError,
  EmptyText,
  InvalidSplit,
  LeakageDetected,
  TooFewItems,
  TooFewTypes,
  InvalidProfile,
  MissingArtifact,
  InvalidArtifact,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedPcap: return "MalformedPcap";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::EmptyFlowInWindow: return "EmptyFlowInWindow";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::AllMasked: return "AllMasked";
    case ErrorKind::EmptyGold: return "EmptyGold";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ProviderAuthError: return "ProviderAuthError";
    case ErrorKind::ProviderTimeout: return "ProviderTimeout";
    case ErrorKind::ProviderError: return "ProviderError";
    case ErrorKind::EmptyText: return "EmptyText";
    case ErrorKind::InvalidSplit: return "InvalidSplit";
    case ErrorKind::LeakageDetected: return "LeakageDetected";
    case ErrorKind::TooFewItems: return "TooFewItems";
    case ErrorKind::TooFewTypes: return "TooFewTypes";
    case ErrorKind::InvalidProfile: return "InvalidProfile";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::InvalidArtifact: return "InvalidArtifact";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace t2t
