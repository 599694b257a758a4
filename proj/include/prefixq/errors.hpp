#pragma once

#include <stdexcept>
#include <string>

namespace prefixq {

// Base error. `kind()` is a stable machine-readable tag used by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& m) : Error("invalid_argument", m) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& m) : Error("shape_mismatch", m) {}
};

class NonFinite : public Error {
 public:
  explicit NonFinite(const std::string& m) : Error("non_finite", m) {}
};

class CorruptFile : public Error {
 public:
  explicit CorruptFile(const std::string& m) : Error("corrupt_file", m) {}
};

class VersionMismatch : public Error {
 public:
  explicit VersionMismatch(const std::string& m) : Error("version_mismatch", m) {}
};

class DimMismatch : public Error {
 public:
  explicit DimMismatch(const std::string& m) : Error("dim_mismatch", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

}  // namespace prefixq
