#pragma once

#include <stdexcept>
#include <string>

namespace mmkd {

// Error taxonomy used across the library:
//   ShapeError    - operand dimensions do not fit an operation
//   ContractError - a documented precondition was violated by the caller
//   StateError    - an object was used outside its legal lifecycle
//   ConfigError   - invalid user-supplied configuration
//   IoError       - file / serialization problems
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace mmkd
