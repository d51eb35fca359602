#pragma once

#include <stdexcept>
#include <string>

namespace emd {

/// Violated operation precondition (bad shapes, out-of-range arguments).
class PreconditionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed manifest, config or checkpoint document.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing, unreadable or unwritable file.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dataset content violates a sample or dataset invariant.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inconsistent configuration (unknown keys, incompatible shapes).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss during optimization.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace emd
