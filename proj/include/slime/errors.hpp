#pragma once

#include <stdexcept>
#include <string>

namespace slime {

// Geometric configuration that admits no unique model (collinear points,
// planar 8-point input, rank-deficient design matrix).
struct DegeneracyError : std::runtime_error {
  explicit DegeneracyError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed structured-text input; carries the 1-based line number.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, int line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_number(line) {}
  int line_number;
};

struct SizeError : std::invalid_argument {
  explicit SizeError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace slime
