#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace picofw {

using Digest = std::array<std::uint8_t, 32>;

// SHA-256 of the given bytes.
Digest compute_checksum(std::string_view canonical_text);

std::string to_hex(const Digest& d);
std::optional<Digest> digest_from_hex(std::string_view hex);

std::string base64_encode(std::string_view bytes);
std::optional<std::string> base64_decode(std::string_view text);

}  // namespace picofw
