#pragma once

#include <stdexcept>
#include <string>

namespace airtopo {

// Bad input data, files or argument values. The CLI maps this to exit code 2.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Violated internal invariant. The CLI maps this to exit code 3.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace airtopo
