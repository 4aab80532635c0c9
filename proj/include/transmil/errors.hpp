#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace transmil {

/// Operand shapes are incompatible for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value or argument is outside its valid range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a precondition that upstream code is supposed to guarantee.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class EmptyBagError : public std::invalid_argument {
 public:
  EmptyBagError() : std::invalid_argument("bag has no instances") {}
};

/// A metric is undefined for the given input (e.g. AUC with a single class).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed binary or text file. Carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace transmil
