#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mqfuzz {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

Bytes to_bytes(std::string_view text);
std::string to_string(ByteView bytes);

/// Lowercase hex, no separators.
std::string to_hex(ByteView bytes);

/// Accepts upper or lower case; nullopt on odd length or a non-hex digit.
std::optional<Bytes> from_hex(std::string_view hex);

/// Well-formed UTF-8 as MQTT requires it: no overlongs, no surrogates,
/// nothing above U+10FFFF.
bool is_valid_utf8(ByteView bytes);

/// Short human label for a byte string: the text itself when it is short
/// printable ASCII, otherwise "len=<n>:<hex prefix>".
std::string byte_label(ByteView bytes, std::size_t max_text = 32);

}  // namespace mqfuzz
