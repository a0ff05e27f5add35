// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared by every module.

#pragma once

#include <stdexcept>
#include <string>

namespace tape {

/// Incompatible tensor shapes or dimensions.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid configuration or argument value (bad rank, unknown preset, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file, wrong magic, unsupported version.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values, missing gradients and other failures during computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing inputs or refusing to clobber outputs.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tape
