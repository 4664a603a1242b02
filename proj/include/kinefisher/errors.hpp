#pragma once

#include <stdexcept>
#include <string>

namespace kinefisher {

/// Base of all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Errors that come from the numerics rather than from the caller's input.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class ConcentrationOverflow : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

/// The distribution is uniform, so it has no mode.
class ModeUndefined : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class SamplerStall : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class OptimizationFailure : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class InsufficientObservation : public Error {
 public:
  using Error::Error;
};

}  // namespace kinefisher
