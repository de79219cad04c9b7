#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace produce {

// Shape, dimension or range violations on the caller's side.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input bytes. `offset` is the byte position where decoding failed.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Well-formed but unsupported variant of a format (e.g. ASCII PPM).
class UnsupportedFormat : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Stored data disagrees with its declared size or structure.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace produce
