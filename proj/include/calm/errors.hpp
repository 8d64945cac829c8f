#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace calm {

/// Coarse error class; the numeric value is the CLI exit status.
enum class ErrorCategory : int {
  usage = 1,
  validation = 2,
  numerical = 3,
  agent = 4,
};

/// Base of every error thrown by the toolkit. `code()` is a stable
/// machine-readable identifier such as "DuplicateCue" or "UnknownLevel".
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string code, const std::string& message)
      : std::runtime_error(message), category_(category), code_(std::move(code)) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& code() const noexcept { return code_; }
  int exit_status() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
  std::string code_;
};

class UsageError : public Error {
 public:
  UsageError(std::string code, const std::string& message)
      : Error(ErrorCategory::usage, std::move(code), message) {}
};

class ValidationError : public Error {
 public:
  ValidationError(std::string code, const std::string& message)
      : Error(ErrorCategory::validation, std::move(code), message) {}
};

class NumericalError : public Error {
 public:
  NumericalError(std::string code, const std::string& message)
      : Error(ErrorCategory::numerical, std::move(code), message) {}
};

class AgentError : public Error {
 public:
  AgentError(std::string code, const std::string& message)
      : Error(ErrorCategory::agent, std::move(code), message) {}
};

}  // namespace calm
