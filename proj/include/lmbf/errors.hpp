#pragma once

#include <stdexcept>
#include <string>

namespace lmbf {

// Base class for everything this library throws on purpose.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or mismatched tensor shapes.
class shape_error : public error {
public:
    using error::error;
};

// Bad layer / network / pipeline configuration.
class config_error : public error {
public:
    using error::error;
};

// Violated operation precondition (caller bug).
class contract_error : public error {
public:
    using error::error;
};

// Malformed input file; message names the byte offset where parsing failed.
class parse_error : public error {
public:
    using error::error;
};

// Non-finite value encountered; message names the offending element.
class numeric_error : public error {
public:
    using error::error;
};

// Training produced a non-finite loss.
class divergence_error : public error {
public:
    using error::error;
};

} // namespace lmbf
