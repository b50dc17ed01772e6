#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace evalnet {

// SHA-256 hex digest of a byte buffer (FIPS 180-4), used for content
// hashes in run manifests.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& text);

}  // namespace evalnet
