#pragma once

#include <stdexcept>
#include <string>

namespace bdiff {

enum class ErrorKind {
    domain,    // argument outside the operation's mathematical domain
    data,      // malformed or unusable input data
    numeric,   // non-finite values or failed factorizations
    lookup,    // unknown class, task or key
    shape,     // dimension mismatch
    state,     // operation invoked in the wrong lifecycle state
    io,        // filesystem or format failure
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::domain: return "domain";
        case ErrorKind::data: return "data";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::lookup: return "lookup";
        case ErrorKind::shape: return "shape";
        case ErrorKind::state: return "state";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

/// Base class for every error raised by the library. The kind drives the CLI exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class DomainError : public Error {
public:
    explicit DomainError(const std::string& m) : Error(ErrorKind::domain, m) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& m) : Error(ErrorKind::data, m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};

class LookupError : public Error {
public:
    explicit LookupError(const std::string& m) : Error(ErrorKind::lookup, m) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};

class StateError : public Error {
public:
    explicit StateError(const std::string& m) : Error(ErrorKind::state, m) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace bdiff
