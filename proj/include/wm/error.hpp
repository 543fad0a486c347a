#pragma once

#include <stdexcept>
#include <string>

namespace wm {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/parameter shape or domain disagreement.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// File could not be read, parsed or written.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite value encountered during optimization. Carries the name of
// the offending parameter or loss term.
class NumericError : public Error {
 public:
  NumericError(const std::string& what_failed, const std::string& msg)
      : Error(msg), name_(what_failed) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

}  // namespace wm
