#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gpc {

enum class ErrorKind {
  MissingFile,
  MalformedRow,
  UnknownZoneCode,
  UnassignedSubject,
  DegenerateLandmarks,
  OutOfBounds,
  EmptyImage,
  BadChannelRequest,
  EmptyDataset,
  ShapeMismatch,
  NMismatch,
  DomainError,
  MissingClass,
  Divergence,
  ChannelMismatch,
  IoError,
  CorruptCheckpoint,
  ConfigMismatch,
  LengthMismatch,
  Empty,
  EmptyMatrix,
  EmptyConditionSet,
  PupilNotFound,
  MissingPrerequisiteCheckpoint,
  MissingCheckpoint,
  BadImage,
  BadConfig,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the toolkit carries a kind so callers (and the CLI
// exit-code mapping) can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace gpc
