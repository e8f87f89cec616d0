#pragma once

#include <stdexcept>
#include <string>

namespace fsa {

// Base type for everything this library throws on purpose. Anything else
// escaping is a bug.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Extent mismatch between tensors or against an op contract.
struct ShapeError : Error {
    using Error::Error;
};

// An op produced (or was handed) NaN/Inf.
struct NumericError : Error {
    using Error::Error;
};

// Invalid model / scene / run configuration; message names the field.
struct ConfigError : Error {
    using Error::Error;
};

// API precondition violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Unreadable, truncated or mismatched checkpoint file.
struct CheckpointError : Error {
    using Error::Error;
};

// Filesystem problems.
struct IoError : Error {
    using Error::Error;
};

} // namespace fsa
