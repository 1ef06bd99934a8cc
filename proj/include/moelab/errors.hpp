#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// ConfigError -> 1, DataError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or width mismatch between tensors/layers.
struct DimensionError : Error {
    using Error::Error;
};

// API contract violated (bad argument, non-scalar loss, empty input, ...).
struct ContractError : Error {
    using Error::Error;
};

// Inconsistent or invalid configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Unknown domain id or missing table entry.
struct LookupError : ConfigError {
    using ConfigError::ConfigError;
};

// Malformed input data, out-of-range tokens, I/O failures.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values or numerically impossible requests.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace moelab
