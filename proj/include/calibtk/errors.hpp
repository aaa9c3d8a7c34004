#pragma once

#include <stdexcept>
#include <string>

namespace calibtk {

// Raised for malformed files and invariant violations in user-supplied data.
// The CLI maps this to exit code 1; anything else is an internal failure (2).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace calibtk
