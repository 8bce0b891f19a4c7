#pragma once

#include <stdexcept>
#include <string>

namespace volseg {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid or mismatched tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed image file contents (bad header, truncated payload, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid network or training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem problems (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or incompatible checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward without a recorded tape.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace volseg
