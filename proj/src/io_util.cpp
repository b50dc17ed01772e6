#include "evalnet/io_util.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "evalnet/errors.hpp"

namespace evalnet {

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    if (size < 0) throw DataError("cannot stat file: " + path);
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), size);
    if (!in) throw DataError("short read: " + path);
    return buf;
}

void write_binary_file_atomic(const std::string& path, const void* data, std::size_t size) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open file for write: " + tmp);
        if (size > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        out.flush();
        if (!out) throw DataError("short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

void write_text_file_atomic(const std::string& path, const std::string& text) {
    write_binary_file_atomic(path, text.data(), text.size());
}

}  // namespace evalnet
