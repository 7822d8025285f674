#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qbn {

// Base for every error raised by the library. code() is a stable
// machine-readable tag used by the CLI ("error: <code>: <message>").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message)
      : Error("dimension", message) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message)
      : Error("contract", message) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& message) : Error("input", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message)
      : Error("config", message) {}
};

class SpecError : public Error {
 public:
  explicit SpecError(const std::string& message) : Error("spec", message) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::uint64_t offset)
      : Error("format", message + " at byte offset " + std::to_string(offset)),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message)
      : Error("numeric", message) {}
};

}  // namespace qbn
