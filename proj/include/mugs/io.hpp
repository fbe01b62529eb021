#pragma once

// Little-endian binary primitives shared by all on-disk formats. Byte order
// is pinned explicitly so files are byte-exact across platforms.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mugs/tensor.hpp"

namespace mugs {

inline void write_u32le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& os, uint64_t v) {
    write_u32le(os, static_cast<uint32_t>(v & 0xffffffffu));
    write_u32le(os, static_cast<uint32_t>(v >> 32));
}

inline void write_f32le(std::ostream& os, float f) {
    uint32_t v;
    static_assert(sizeof(v) == sizeof(f));
    std::memcpy(&v, &f, 4);
    write_u32le(os, v);
}

inline void write_f32le_array(std::ostream& os, const std::vector<float>& data) {
    for (float f : data) write_f32le(os, f);
}

inline bool read_exact(std::istream& is, void* dst, size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

inline uint32_t read_u32le(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!read_exact(is, b, 4)) throw Error("truncated file while reading " + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64le(std::istream& is, const std::string& what) {
    const uint64_t lo = read_u32le(is, what);
    const uint64_t hi = read_u32le(is, what);
    return lo | (hi << 32);
}

inline float read_f32le(std::istream& is, const std::string& what) {
    const uint32_t v = read_u32le(is, what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

inline std::vector<float> read_f32le_array(std::istream& is, size_t n, const std::string& what) {
    std::vector<float> out(n);
    std::vector<unsigned char> raw(n * 4);
    if (!read_exact(is, raw.data(), raw.size())) throw Error("truncated file while reading " + what);
    for (size_t i = 0; i < n; ++i) {
        const uint32_t v = static_cast<uint32_t>(raw[4 * i]) |
                           (static_cast<uint32_t>(raw[4 * i + 1]) << 8) |
                           (static_cast<uint32_t>(raw[4 * i + 2]) << 16) |
                           (static_cast<uint32_t>(raw[4 * i + 3]) << 24);
        std::memcpy(&out[i], &v, 4);
    }
    return out;
}

inline void expect_magic(std::istream& is, const char magic[4], const std::string& path) {
    char got[4];
    if (!read_exact(is, got, 4) || std::memcmp(got, magic, 4) != 0)
        throw Error("bad magic in " + path + ": expected '" + std::string(magic, 4) + "'");
}

inline std::ofstream open_for_write(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_for_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open for reading: " + path);
    return is;
}

}  // namespace mugs
