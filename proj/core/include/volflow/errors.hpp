#pragma once

#include <stdexcept>
#include <string>

namespace volflow {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// File could not be opened, read, or written.
struct IoError : Error {
    using Error::Error;
};

/// Malformed file contents (bad magic, header fields, dtype).
struct FormatError : Error {
    using Error::Error;
};

/// Payload shorter or longer than the header demands.
struct LengthError : FormatError {
    using FormatError::FormatError;
};

/// Invalid argument or config value.
struct ArgumentError : Error {
    using Error::Error;
};

/// Tensor/volume shape mismatch, odd channel counts, non-divisible edges.
struct ShapeError : Error {
    using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

/// Patch sampling could not find a valid origin.
struct SamplingError : Error {
    using Error::Error;
};

/// Calibration distribution missing or too small.
struct CalibrationError : Error {
    using Error::Error;
};

/// Metric undefined for the given inputs (e.g. single-class AUROC).
struct MetricError : Error {
    using Error::Error;
};

/// Threshold selection impossible (e.g. single-class validation set).
struct SelectionError : Error {
    using Error::Error;
};

/// Data-dependent initialization failed (e.g. zero-variance channel).
struct InitError : Error {
    using Error::Error;
};

/// Synthetic lesion placement exhausted its retry budget.
struct PlacementError : Error {
    using Error::Error;
};

}  // namespace volflow
