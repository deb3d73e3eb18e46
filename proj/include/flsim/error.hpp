#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flsim {

/// Base class for every failure the simulator reports.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor or layer dimensions do not line up.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid configuration value, architecture, or fixture name.
struct ConfigError : Error {
    using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

/// An API precondition was violated (e.g. backward on a stale cache).
struct ContractError : Error {
    using Error::Error;
};

/// Parameter sets whose names or shapes do not match the target model.
struct IncompatibleParamsError : Error {
    using Error::Error;
};

/// Client/server wire contract violations (mixed partition tags, empty rounds).
struct ProtocolError : Error {
    using Error::Error;
};

/// train/test split would leave one side empty.
struct SplitError : Error {
    using Error::Error;
};

/// Operation requires the 64-bit element type.
struct PrecisionError : Error {
    using Error::Error;
};

/// A checkpoint file that should exist is missing.
struct MissingStateError : Error {
    using Error::Error;
};

/// Malformed or corrupted serialized payload; carries the offending byte offset.
struct CorruptFileError : Error {
    std::size_t byte_offset;

    CorruptFileError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

}  // namespace flsim
