#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace faqd {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension mismatches; messages name the offending primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Unsupported or inconsistent configuration (bad primitive id, eta <= 1, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API called out of order (backward before forward, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// Bad runtime values (NaN weights, out-of-range labels, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed files (checkpoints, dataset records, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

}  // namespace faqd
