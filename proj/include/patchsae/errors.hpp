#pragma once

#include <stdexcept>
#include <string>

namespace patchsae {

/// Violated precondition of an operation (bad shapes, non-finite input, ...).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent or unknown configuration (backbone id, dimensions).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed, truncated, or version-mismatched file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Requested entity (image, latent, artifact) does not exist.
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

#define PATCHSAE_REQUIRE(cond, msg)                                          \
    do {                                                                     \
        if (!(cond)) throw ::patchsae::ContractError(std::string(msg));      \
    } while (0)

} // namespace patchsae
