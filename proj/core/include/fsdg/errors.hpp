#pragma once

#include <stdexcept>
#include <string>

namespace fsdg {

// Exit-code mapping for the CLI: ConfigError -> 1, DataError -> 2,
// NumericError -> 3. ShapeError is a programming/config problem.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : ConfigError {
  explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

}  // namespace fsdg
