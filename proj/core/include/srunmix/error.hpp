#pragma once

#include <stdexcept>
#include <string>

namespace srunmix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed band file or manifest header.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Payload shorter than the header promises.
class TruncationError : public Error {
public:
    using Error::Error;
};

/// Grid dimensions incompatible with the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Caller violated an input contract.
class PreconditionError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Non-finite values appeared inside an iterative solve.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A quality metric is undefined for the given images.
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Scene manifest inconsistent with the requested processing.
class ManifestError : public Error {
public:
    using Error::Error;
};

}  // namespace srunmix
