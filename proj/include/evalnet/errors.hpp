#pragma once

#include <stdexcept>
#include <string>

namespace evalnet {

// Error taxonomy mirrored by the CLI exit codes:
//   UsageError -> 1, DataError -> 2, NumericError -> 3.
// Messages are single-line and machine-parsable ("kind: detail").

class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error("usage: " + msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error("data: " + msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric: " + msg) {}
};

// Shape/contract violations inside the tensor engine and model blocks.
class ShapeError : public DataError {
public:
    explicit ShapeError(const std::string& msg) : DataError("shape: " + msg) {}
};

}  // namespace evalnet
