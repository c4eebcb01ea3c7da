#pragma once

#include <stdexcept>
#include <string>

namespace p4p {

// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file (bad column, bad value, missing header).
class SchemaError : public Error {
public:
    SchemaError(const std::string& msg, std::size_t line = 0, const std::string& column = "")
        : Error(format(msg, line, column)), line_(line), column_(column) {}
    std::size_t line() const { return line_; }
    const std::string& column() const { return column_; }

private:
    static std::string format(const std::string& msg, std::size_t line, const std::string& column) {
        std::string out = msg;
        if (line > 0) out += " (line " + std::to_string(line) + ")";
        if (!column.empty()) out += " [column " + column + "]";
        return out;
    }
    std::size_t line_;
    std::string column_;
};

// Dataset-level invariant violation (not tied to a single row).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Cholesky pivot failure; reports the offending pivot index.
class SingularMatrixError : public Error {
public:
    SingularMatrixError(const std::string& msg, int pivot_index)
        : Error(msg + " (pivot " + std::to_string(pivot_index) + ")"), pivot_(pivot_index) {}
    int pivot_index() const { return pivot_; }

private:
    int pivot_;
};

// Complete separation in a logistic fit.
class SeparationError : public Error {
public:
    using Error::Error;
};

// Non-finite objective encountered during a line search.
class LineSearchError : public Error {
public:
    using Error::Error;
};

// Data structure too degenerate to estimate the requested model.
class StructureError : public Error {
public:
    using Error::Error;
};

// Design matrix problem (collinearity, empty groups); names the columns involved.
class DesignError : public Error {
public:
    using Error::Error;
};

// Requested a quantity the fitted scheme does not contain.
class SchemeMismatchError : public Error {
public:
    using Error::Error;
};

// Numerical non-convergence in a context that cannot return a flagged fit.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Invalid run configuration (bad replicate count, bad year window, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// File-system failure (missing file, unwritable output).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace p4p
