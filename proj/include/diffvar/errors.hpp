#pragma once

#include <stdexcept>
#include <string>

namespace diffvar {

// Precondition or configuration violation; the CLI maps it to exit code 2.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced unusable numbers (too many rejected samples,
// divergence, non-finite values); the CLI maps it to exit code 3.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace diffvar
