#pragma once

#include <stdexcept>
#include <string>

namespace cytofm {

// Bad input, bad configuration or a violated precondition. The CLI maps this
// to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while doing otherwise valid work (I/O, non-finite loss, ...).
// The CLI maps this to exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CYTOFM_REQUIRE(cond, msg)                                   \
  do {                                                              \
    if (!(cond)) throw ::cytofm::ValidationError(std::string(msg)); \
  } while (0)

}  // namespace cytofm
