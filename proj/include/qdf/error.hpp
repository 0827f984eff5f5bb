#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qdf {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition was violated (shape mismatch, empty input, ...).
class ContractViolation : public Error {
public:
    using Error::Error;
};

/// Input is numerically unusable: rank-deficient matrix, vanishing pivot.
class DegenerateInput : public Error {
public:
    using Error::Error;
};

/// A retraction step could not be completed (caller may halve the step size).
class DegenerateStep : public Error {
public:
    using Error::Error;
};

/// Requested setting lies outside what the availability protocol supports.
class ProtocolBound : public Error {
public:
    using Error::Error;
};

/// Non-finite value or diverging iteration; carries the step index at which
/// the problem was detected.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what, std::size_t step = 0)
        : Error(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_ = 0;
};

/// Invalid run configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace qdf
