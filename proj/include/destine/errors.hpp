#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace destine {

// Dimension mismatch between tensors. Keeps both shapes for diagnostics.
class ShapeError : public std::invalid_argument {
public:
    using Shape = std::pair<std::size_t, std::size_t>;

    ShapeError(std::string what, Shape lhs, Shape rhs)
        : std::invalid_argument(std::move(what)), lhs_(lhs), rhs_(rhs) {}

    Shape lhs() const { return lhs_; }
    Shape rhs() const { return rhs_; }

private:
    Shape lhs_;
    Shape rhs_;
};

// Argument outside the function's domain (empty input, rate >= 1, ...).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input data; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    explicit ParseError(const std::string& what) : std::runtime_error(what), line_(0) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// Column/schema level problems in input data.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Feature index outside its field's vocabulary range.
class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Invalid run configuration; names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : std::runtime_error("config key '" + key + "': " + what), key_(key) {}

    const std::string& key() const { return key_; }

private:
    std::string key_;
};

// Unreadable or inconsistent checkpoint document.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace destine
