#pragma once
// SHA-256 and CRC-32 used for request/reply hashing and checkpoint checksums.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace care {

// FIPS 180-4 SHA-256; returns the 64-hex-digit lowercase digest.
std::string sha256_hex(std::string_view data);

// CRC-32 (IEEE 802.3 polynomial, reflected).
std::uint32_t crc32(const void* data, std::size_t len);

}  // namespace care
