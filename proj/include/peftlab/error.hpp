// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible matrix/tensor shapes. The message names both shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Filesystem-level failures (open/read/write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

// Malformed persisted data. The message identifies the offending record.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what) {}
};

// Non-finite value encountered where a finite one is required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what) {}
};

}  // namespace peftlab
