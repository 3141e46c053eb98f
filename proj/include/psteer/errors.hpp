#pragma once

#include <stdexcept>
#include <string>

namespace psteer {

// Base for all library errors. CLI maps these to exit code 2;
// argument/usage problems are handled by the CLI layer itself (exit 1).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor rank/dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Zero-norm vectors, empty prompts, zero-confidence embeddings.
struct DegenerateInputError : Error {
    using Error::Error;
};

// Empty collections where at least one element is required.
struct EmptyInputError : Error {
    using Error::Error;
};

// NaN/Inf entering a tensor.
struct NumericError : Error {
    using Error::Error;
};

// Malformed JSON or binary container.
struct ParseError : Error {
    using Error::Error;
};

// Structurally valid input violating a schema (missing/extra keys, wrong types).
struct SchemaError : Error {
    using Error::Error;
};

// Invalid configuration values (negative epochs, bad paths).
struct ConfigError : Error {
    using Error::Error;
};

// Scene generator exhausted its placement attempts.
struct PlacementError : Error {
    using Error::Error;
};

// Metric requested over an empty ground-truth set.
struct MetricError : Error {
    using Error::Error;
};

// File could not be opened/read/written.
struct IoError : Error {
    using Error::Error;
};

} // namespace psteer
