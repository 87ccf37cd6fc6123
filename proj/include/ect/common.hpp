#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ect {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// usage/validation errors -> 2, runtime/numeric failures -> 3.
struct InvalidSpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    double residual = 0.0;
    explicit NumericError(const std::string& msg, double res = 0.0)
        : std::runtime_error(msg), residual(res) {}
};

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    std::size_t byte_offset = 0;
    explicit FormatError(const std::string& msg, std::size_t offset = 0)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

}  // namespace ect
