#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dragonfly {

/// Operand shapes do not conform for the named op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Value outside the mathematical domain of an operation (softlog input, log argument, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A forward or backward computation produced NaN/Inf. Carries the producing op.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Malformed layer notation or config text. `position` is a 0-based character offset.
class ParseError : public std::invalid_argument {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::invalid_argument(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// File format or filesystem failure; the message names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dragonfly
