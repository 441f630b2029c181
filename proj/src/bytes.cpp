#include "bytes.hpp"

#include <cstdio>

namespace fishseg {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) raise(ErrorKind::Io, "cannot open for reading: " + path);
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(len < 0 ? 0 : len));
    const std::size_t got = buf.empty() ? 0 : std::fread(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (got != buf.size()) raise(ErrorKind::Io, "short read: " + path);
    return buf;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) raise(ErrorKind::Io, "cannot open for writing: " + path);
    const std::size_t put = bytes.empty() ? 0 : std::fwrite(bytes.data(), 1, bytes.size(), f);
    const int rc = std::fclose(f);
    if (put != bytes.size() || rc != 0) raise(ErrorKind::Io, "short write: " + path);
}

}  // namespace fishseg
