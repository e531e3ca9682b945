#pragma once

#include <stdexcept>
#include <string>

namespace ttrbody {

// Base for every error thrown by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class InvalidParameterError : public Error {
public:
    using Error::Error;
};

class InvalidCameraError : public Error {
public:
    using Error::Error;
};

// Non-finite value encountered; `index` names the offending flat entry when known.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what, long index = -1)
        : Error(index >= 0 ? what + " (index " + std::to_string(index) + ")" : what), index_(index) {}
    long index() const noexcept { return index_; }

private:
    long index_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

// Schema violation while reading a file. `line` is 1-based, 0 when unknown.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what, std::size_t line = 0)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DegeneracyError : public Error {
public:
    using Error::Error;
};

}  // namespace ttrbody
