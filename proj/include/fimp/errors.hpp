#pragma once

#include <stdexcept>
#include <string>

namespace fimp {

// Bad user input: config files, CLI flags, incompatible task/model choices.
// The CLI maps this family to exit code 1, everything else to 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor/graph shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, diverged training, failed numeric checks.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files (checkpoints, datasets).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fimp
