#pragma once

#include <stdexcept>
#include <string>

namespace flowgate {

// Malformed or unreadable input data (files, annotations, frames).
// The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace flowgate
