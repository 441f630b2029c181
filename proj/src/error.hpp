#pragma once

#include <stdexcept>
#include <string>

namespace fishseg {

enum class ErrorKind {
    InvalidArgument,  // bad parameter value or usage
    Dimension,        // shape / size mismatch
    Data,             // content violates a contract (non-binary mask, NaN weight, ...)
    Format,           // bad magic, version or truncated file
    Io,               // filesystem failure
    State,            // call sequencing violation (missing grad, ...)
    Internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

}  // namespace fishseg
