#pragma once

#include <stdexcept>
#include <string>

namespace recess {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Errors caused by bad input (flags, configs, manifests). The CLI maps
/// these to exit code 1; everything else is a runtime failure.
class UserError : public Error {
public:
    using Error::Error;
};

class ParseError : public UserError {
public:
    ParseError(const std::string& what, long line = -1)
        : UserError(line >= 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

class ValidationError : public UserError {
public:
    ValidationError(const std::string& what, long line = -1)
        : UserError(line >= 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

class ShapeError : public UserError {
public:
    using UserError::UserError;
};

class ModeError : public UserError {
public:
    using UserError::UserError;
};

class LengthMismatch : public UserError {
public:
    using UserError::UserError;
};

class TooFewPatients : public UserError {
public:
    using UserError::UserError;
};

class NoPositiveSamples : public UserError {
public:
    using UserError::UserError;
};

class NoFrameFound : public Error {
public:
    using Error::Error;
};

class NoDetection : public Error {
public:
    NoDetection() : Error("no SQR found") {}
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
};

class EmptySet : public Error {
public:
    using Error::Error;
};

class EmptyHistory : public Error {
public:
    using Error::Error;
};

class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace recess
