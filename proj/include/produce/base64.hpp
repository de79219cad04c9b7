#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace produce::base64 {

// RFC 4648 standard alphabet with '=' padding.
std::string encode(std::span<const std::uint8_t> bytes);

// Throws ParseError carrying the offset of the first invalid character.
std::vector<std::uint8_t> decode(std::string_view text);

} // namespace produce::base64
