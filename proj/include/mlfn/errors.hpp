#pragma once

#include <stdexcept>
#include <string>

namespace mlfn {

/// Extents of two operands disagree, or a spec is inconsistent with its inputs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on call order or arguments was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Batch-norm in train mode was given a single sample.
class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A kernel produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two forward passes over identical inputs disagreed.
class DeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training loss became NaN or stayed far above its starting value.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// More identities requested than the factor space can render.
class CapacityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mlfn
