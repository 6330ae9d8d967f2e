#pragma once

#include <stdexcept>
#include <string>

namespace coiba {

enum class ErrorKind {
  Config,
  Dimension,
  Index,
  Contract,
  Stats,
  Optimization,
  Training,
  Parse,
  Io,
  Imputation,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; `kind()` drives the C status code
// and the CLI exit code.
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

}  // namespace coiba
