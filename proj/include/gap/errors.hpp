// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gap {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or image extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (labels, coordinates, files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Index outside an image or tensor.
class BoundsError : public Error {
 public:
  using Error::Error;
};

/// Dataset generation gave up (rejection sampling exhausted).
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace gap
