#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "xfake/errors.hpp"

namespace xfake::detail {

inline void write_doubles(const std::filesystem::path& path, const std::vector<double>& values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!f) throw IoError("short write to " + path.string());
}

inline std::vector<double> read_doubles(const std::filesystem::path& path, int64_t count) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot read " + path.string());
    const auto bytes = static_cast<int64_t>(f.tellg());
    if (bytes != count * static_cast<int64_t>(sizeof(double)))
        throw IoError("checkpoint size mismatch in " + path.string());
    std::vector<double> values(static_cast<size_t>(count));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(values.data()), bytes);
    if (!f) throw IoError("short read from " + path.string());
    return values;
}

inline std::string hash_to_hex(uint64_t h) {
    std::ostringstream os;
    os << "0x" << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace xfake::detail
