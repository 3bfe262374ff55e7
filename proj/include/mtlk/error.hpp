#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mtlk {

enum class ErrorKind {
  ShapeMismatch,
  NonScalarRoot,
  BadConfig,
  BadLabel,
  MissingGradient,
  ParseError,
  MissingImage,
  UnknownLabel,
  BadSpec,
  CropTooLarge,
  NoPositives,
  BadK,
  MatrixMismatch,
  BadClass,
  DimensionMismatch,
  IoError,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and the CLI)
// can react without parsing the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mtlk
