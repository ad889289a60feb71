#pragma once

#include <stdexcept>
#include <string>

namespace flam {

// Error categories map onto CLI exit codes: config/usage -> 2,
// data/format -> 3, training failure -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated preconditions on library calls (shape mismatches, bad indices).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace flam
