#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crowdctx {

// Root of every error thrown by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes that cannot be combined, windows larger than their input, etc.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by a forward op.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace crowdctx
