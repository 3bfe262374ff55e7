#include "mtlk/error.hpp"

namespace mtlk {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonScalarRoot: return "NonScalarRoot";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::BadLabel: return "BadLabel";
    case ErrorKind::MissingGradient: return "MissingGradient";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::MissingImage: return "MissingImage";
    case ErrorKind::UnknownLabel: return "UnknownLabel";
    case ErrorKind::BadSpec: return "BadSpec";
    case ErrorKind::CropTooLarge: return "CropTooLarge";
    case ErrorKind::NoPositives: return "NoPositives";
    case ErrorKind::BadK: return "BadK";
    case ErrorKind::MatrixMismatch: return "MatrixMismatch";
    case ErrorKind::BadClass: return "BadClass";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace mtlk
