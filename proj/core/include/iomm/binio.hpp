#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "iomm/errors.hpp"

// Little-endian binary IO, explicit bytes so blobs are platform-independent.

namespace iomm {

inline void put_u16le(std::string& out, uint16_t x) {
    out.push_back(char(x & 0xff));
    out.push_back(char(x >> 8));
}

inline void put_u32le(std::string& out, uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
}

inline void put_u64le(std::string& out, uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
}

inline void put_f32le(std::string& out, float x) {
    uint32_t bits;
    std::memcpy(&bits, &x, 4);
    put_u32le(out, bits);
}

inline void put_f64le(std::string& out, double x) {
    uint64_t bits;
    std::memcpy(&bits, &x, 8);
    put_u64le(out, bits);
}

// Cursor over a loaded blob; throws FormatError with the byte offset on
// truncation.
struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    std::string name;

    ByteReader(const std::string& b, std::string n) : buf(b), name(std::move(n)) {}

    void need(size_t n) const {
        if (pos + n > buf.size()) {
            throw FormatError("corrupt blob " + name + ": need " + std::to_string(n) +
                              " bytes at offset " + std::to_string(pos) + ", have " +
                              std::to_string(buf.size() - pos));
        }
    }

    uint16_t u16() {
        need(2);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 2;
        return uint16_t(p[0]) | uint16_t(p[1]) << 8;
    }

    uint32_t u32() {
        need(4);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 4;
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= uint32_t(p[i]) << (8 * i);
        return x;
    }

    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 8;
        for (int i = 0; i < 8; ++i) x |= uint64_t(p[i]) << (8 * i);
        return x;
    }

    float f32() {
        const uint32_t bits = u32();
        float x;
        std::memcpy(&x, &bits, 4);
        return x;
    }

    double f64() {
        const uint64_t bits = u64();
        double x;
        std::memcpy(&x, &bits, 8);
        return x;
    }

    bool done() const { return pos == buf.size(); }
};

std::string inline read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file_bytes(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + path + " for writing");
    f.write(data.data(), std::streamsize(data.size()));
    if (!f) throw FormatError("short write to " + path);
}

}  // namespace iomm
