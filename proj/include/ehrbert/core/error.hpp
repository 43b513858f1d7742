// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehrbert {

/// Base class of every error raised by the library. The CLI maps any
/// Error escaping a subcommand to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class VocabRangeError : public RangeError {
 public:
  using RangeError::RangeError;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class EmptyVisit : public Error {
 public:
  using Error::Error;
};

class EmptyPatient : public Error {
 public:
  using Error::Error;
};

class EmptyCohort : public Error {
 public:
  using Error::Error;
};

class TooSmall : public Error {
 public:
  using Error::Error;
};

class DegenerateSample : public Error {
 public:
  using Error::Error;
};

class DegenerateLabels : public Error {
 public:
  using Error::Error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::vector<std::size_t>& a,
             const std::vector<std::size_t>& b)
      : Error(op + ": incompatible shapes " + shape_string(a) + " and " +
              shape_string(b)) {}
  explicit ShapeError(const std::string& what) : Error(what) {}
};

}  // namespace ehrbert
