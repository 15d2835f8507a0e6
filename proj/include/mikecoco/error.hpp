#pragma once

#include <stdexcept>
#include <string>

namespace mikecoco {

// Bad input, bad configuration, or a violated precondition. Maps to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Failure while doing otherwise valid work (I/O, non-finite loss, ...). Maps to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace mikecoco
