#pragma once

#include <stdexcept>
#include <string>

namespace agconv {

// Base class for everything this library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix shapes.
class DimError : public Error {
public:
    using Error::Error;
};

// Size preconditions (k > N, m > N, pool underflow, degenerate clouds).
class SizeError : public Error {
public:
    using Error::Error;
};

// Violated operation contract (non-scalar loss, missing grad, bad slope).
class ContractError : public Error {
public:
    using Error::Error;
};

// Bad configuration value or unknown key.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed text input (xyz files, manifests, config files).
class ParseError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Filesystem and serialization failures (checkpoints included).
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace agconv
