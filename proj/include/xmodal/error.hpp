#pragma once

#include <stdexcept>
#include <string>

namespace xmodal {

// Invalid arguments or configuration supplied by the caller.
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed, inconsistent or unreadable data.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf or divergence during a numeric computation.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace xmodal
