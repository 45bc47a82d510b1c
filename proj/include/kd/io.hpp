#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd::io {

// explicit little-endian encoding, independent of host byte order

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    const uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_f32_array(std::ostream& os, const std::vector<float>& data) {
    for (float v : data) write_f32(os, v);
}

inline std::vector<float> read_f32_array(std::istream& is, size_t count) {
    std::vector<float> data(count);
    for (float& v : data) v = read_f32(is);
    return data;
}

inline void write_magic(std::ostream& os, const char magic[5]) { os.write(magic, 4); }

inline void read_magic(std::istream& is, const char magic[5], const std::string& path) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw IoError(path + ": bad magic, expected " + std::string(magic, 4));
}

}  // namespace kd::io
