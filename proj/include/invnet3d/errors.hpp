#pragma once

#include <stdexcept>
#include <string>

namespace invnet3d {

// Error taxonomy shared by every module. All derive from std::runtime_error or
// std::logic_error so callers can catch broadly at the CLI boundary.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace invnet3d
