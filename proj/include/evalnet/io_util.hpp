#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace evalnet {

// Whole-file reads/writes for the binary formats. Writes go through a
// temp file in the same directory followed by a rename, so partially
// written artifacts are never visible under the target name.
std::vector<std::uint8_t> read_binary_file(const std::string& path);
void write_binary_file_atomic(const std::string& path, const void* data, std::size_t size);
void write_text_file_atomic(const std::string& path, const std::string& text);

}  // namespace evalnet
