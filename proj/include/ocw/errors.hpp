#pragma once

#include <stdexcept>
#include <string>

namespace ocw {

// Invalid user input: bad shapes, bad config values, unknown names.
struct invalid_input : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// File / container problems.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure (singular system, Cholesky breakdown, ...).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ocw
