// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pathcast {

enum class ErrorCode {
  // graph construction / validation
  CycleDetected,
  UnreachableNode,
  DuplicateGroupMembership,
  UnknownName,
  DuplicateName,
  InvalidGraph,
  // path algorithms
  NotALabelNode,
  // numerics
  ShapeMismatch,
  EmptyBlock,
  IndexOutOfRange,
  // model / decoding
  InvalidPath,
  NoCandidates,
  // trainer
  EmptyRewardSet,
  // evaluation
  EmptyDataset,
  NoAuditableSamples,
  // harness
  InconsistentSpec,
  UnresolvableLabel,
  // io / config
  FormatError,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::UnreachableNode: return "UnreachableNode";
    case ErrorCode::DuplicateGroupMembership: return "DuplicateGroupMembership";
    case ErrorCode::UnknownName: return "UnknownName";
    case ErrorCode::DuplicateName: return "DuplicateName";
    case ErrorCode::InvalidGraph: return "InvalidGraph";
    case ErrorCode::NotALabelNode: return "NotALabelNode";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyBlock: return "EmptyBlock";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::InvalidPath: return "InvalidPath";
    case ErrorCode::NoCandidates: return "NoCandidates";
    case ErrorCode::EmptyRewardSet: return "EmptyRewardSet";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NoAuditableSamples: return "NoAuditableSamples";
    case ErrorCode::InconsistentSpec: return "InconsistentSpec";
    case ErrorCode::UnresolvableLabel: return "UnresolvableLabel";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `names` carries the offending node,
/// group or parameter names when there are any.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::vector<std::string> names = {})
      : std::runtime_error(format(code, message, names)), code_(code), names_(std::move(names)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  static std::string format(ErrorCode code, const std::string& message,
                            const std::vector<std::string>& names) {
    std::string out(to_string(code));
    out += ": ";
    out += message;
    if (!names.empty()) {
      out += " [";
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += ", ";
        out += names[i];
      }
      out += "]";
    }
    return out;
  }

  ErrorCode code_;
  std::vector<std::string> names_;
};

}  // namespace pathcast
