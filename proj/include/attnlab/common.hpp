#pragma once

#include <stdexcept>
#include <string>

namespace attnlab {

// Error taxonomy. The CLI maps these onto exit codes:
//   ShapeError / std::invalid_argument -> usage (1)
//   DataError                          -> data error (2)
//   NumericError                       -> numeric failure (3)
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

inline void check_data(bool ok, const std::string& msg) {
    if (!ok) throw DataError(msg);
}

}  // namespace attnlab
