#pragma once

#include <stdexcept>
#include <string>

namespace divctl {

// Violated precondition or shape contract. CLI exit code 1.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Malformed caller-supplied value (empty text, non-finite logits).
class InvalidInput : public ContractError {
public:
    using ContractError::ContractError;
};

// Unknown config key, bad value, unknown transform kind.
class ConfigError : public ContractError {
public:
    using ContractError::ContractError;
};

// NaN loss, SVD failure. CLI exit code 2.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint or run directory could not be read back.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NotFoundError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw ContractError(what);
    }
}

}  // namespace divctl
