#pragma once

#include <stdexcept>
#include <string>

namespace mavt {

// Base class for everything thrown on purpose by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/rank mismatch in a tensor operation.
struct DimensionError : Error {
  using Error::Error;
};

// Bad run configuration: unknown key, unparsable value, out-of-range setting.
struct ConfigError : Error {
  using Error::Error;
};

// API misuse: calling an operation in a state it does not support.
struct ContractError : Error {
  using Error::Error;
};

// Malformed file content (checkpoints, samples, manifests).
struct FormatError : Error {
  using Error::Error;
};

// Data generation cannot satisfy a request (e.g. mismatch pair with one class).
struct SamplingError : Error {
  using Error::Error;
};

// Non-finite value where a finite one is required (loss, gradient, metric).
struct NumericalError : Error {
  using Error::Error;
};

// A check ran fine but its result is out of tolerance (gradcheck, trends).
struct ThresholdError : Error {
  using Error::Error;
};

}  // namespace mavt
