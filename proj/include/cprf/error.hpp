#pragma once
#include <stdexcept>
#include <string>

namespace cprf {

enum class ErrorKind {
    InvalidDimension,
    Configuration,
    Domain,
    Shape,
    EmptyForest,
    Numerical,
    Estimation,
    Parse,
    Resource,
    Io,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

} // namespace cprf
