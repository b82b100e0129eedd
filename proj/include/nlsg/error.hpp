#pragma once

#include <stdexcept>
#include <string>

namespace nlsg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Mismatched grid dimensions, class counts or annotator counts.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value violates a documented precondition (non-finite input, label out of range, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (bad magic, truncated payload, unknown keys).
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace nlsg
