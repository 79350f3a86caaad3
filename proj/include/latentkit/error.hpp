#pragma once

#include <stdexcept>
#include <string>

namespace latentkit {

// Base for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range index (token id, axis, expert id).
struct IndexError : Error {
    using Error::Error;
};

// Invalid configuration (widths, group counts, rope dims).
struct ConfigError : Error {
    using Error::Error;
};

// Decode cache used with an incompatible config or params.
struct CacheError : Error {
    using Error::Error;
};

// Required runtime state missing (snapshot log-probs, rewards).
struct StateError : Error {
    using Error::Error;
};

// Non-finite value where a finite one is required.
struct NumericError : Error {
    using Error::Error;
};

// Bad user input at the harness/CLI boundary.
struct UsageError : Error {
    using Error::Error;
};

// All selected routing affinities are zero, gates cannot normalize.
struct DegenerateGateError : Error {
    using Error::Error;
};

} // namespace latentkit
