#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace neft {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 1 with the message on a single line.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct DtypeError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

/// A file carried a format_version this build does not understand.
struct FormatVersionError : IoError {
    using IoError::IoError;
};

/// Stored content hash does not match the payload (corruption).
struct HashMismatchError : IoError {
    using IoError::IoError;
};

/// Training hit a non-finite loss; carries enough state to reproduce the step.
struct DivergenceError : Error {
    DivergenceError(std::string msg, std::int64_t step_, std::vector<std::int64_t> batch_indices_)
        : Error(std::move(msg)), step(step_), batch_indices(std::move(batch_indices_)) {}

    std::int64_t step;
    std::vector<std::int64_t> batch_indices;
};

}  // namespace neft
