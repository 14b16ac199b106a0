#include "factrace/error.hpp"

namespace factrace {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::Io: return "Io";
    case ErrorKind::MissingTensor: return "MissingTensor";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::SchemaVersion: return "SchemaVersion";
    case ErrorKind::SubjectNotFound: return "SubjectNotFound";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::InsufficientCases: return "InsufficientCases";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::MissingCandidates: return "MissingCandidates";
    case ErrorKind::MissingPrerequisite: return "MissingPrerequisite";
    case ErrorKind::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::SiteOutOfRange: return "SiteOutOfRange";
  }
  return "Unknown";
}

ErrorClass classify(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::InvalidArgument:
      return ErrorClass::Config;
    case ErrorKind::TokenOutOfRange:
    case ErrorKind::SiteOutOfRange:
      return ErrorClass::Engine;
    default:
      return ErrorClass::Data;
  }
}

InsufficientCasesError::InsufficientCasesError(std::size_t found, std::size_t requested)
    : Error(ErrorKind::InsufficientCases,
            "only " + std::to_string(found) + " of " + std::to_string(requested) +
                " requested cases are predicted correctly"),
      found_(found),
      requested_(requested) {}

}  // namespace factrace
