#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace factrace {

enum class ErrorKind {
  // configuration
  InvalidConfig,
  InvalidArgument,
  // data / input files
  Io,
  MissingTensor,
  ShapeMismatch,
  UnsupportedDtype,
  MalformedRecord,
  SchemaVersion,
  SubjectNotFound,
  EmptyDataset,
  InsufficientCases,
  UnknownToken,
  MissingCandidates,
  MissingPrerequisite,
  // engine
  TokenOutOfRange,
  SiteOutOfRange,
};

std::string_view to_string(ErrorKind kind);

// Broad class of an error, used for process exit codes.
enum class ErrorClass { Config, Data, Engine };

ErrorClass classify(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Thrown by filter_correct; carries the number of qualifying cases found.
class InsufficientCasesError : public Error {
 public:
  InsufficientCasesError(std::size_t found, std::size_t requested);
  std::size_t found() const noexcept { return found_; }
  std::size_t requested() const noexcept { return requested_; }

 private:
  std::size_t found_;
  std::size_t requested_;
};

}  // namespace factrace
