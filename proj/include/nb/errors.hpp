#pragma once

#include <stdexcept>
#include <string>

namespace nb {

// Base for all library errors. CLI maps subclasses onto exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration (CLI exit 2).
struct ConfigError : Error {
    using Error::Error;
};

// Anything wrong with data files or dataset contents (CLI exit 3).
struct DataError : Error {
    using Error::Error;
};

// Numeric blow-up: a primitive produced NaN/Inf (CLI exit 4).
struct NonFiniteError : Error {
    using Error::Error;
};

struct ShapeMismatchError : Error {
    using Error::Error;
};

struct NotScalarError : Error {
    using Error::Error;
};

struct EmptyTapeError : Error {
    using Error::Error;
};

struct StateShapeMismatchError : Error {
    using Error::Error;
};

struct EmptySceneError : Error {
    using Error::Error;
};

struct FractionOutOfRangeError : ConfigError {
    using ConfigError::ConfigError;
};

struct RateOutOfRangeError : ConfigError {
    using ConfigError::ConfigError;
};

struct CorruptFileError : DataError {
    using DataError::DataError;
};

struct VersionMismatchError : DataError {
    using DataError::DataError;
};

struct ConfigMismatchError : DataError {
    using DataError::DataError;
};

struct SequenceTooLongError : Error {
    using Error::Error;
};

struct BadImageShapeError : Error {
    using Error::Error;
};

struct EmptyBatchError : Error {
    using Error::Error;
};

struct EmptyRecordError : Error {
    using Error::Error;
};

struct TooFewRowsError : Error {
    using Error::Error;
};

struct SceneNotFoundError : DataError {
    using DataError::DataError;
};

struct DatasetEmptyError : DataError {
    using DataError::DataError;
};

}  // namespace nb
