#pragma once

// Minimal PNG writer (8-bit RGB, stored deflate blocks). Enough for the
// dataset export; no external compression dependency.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "p2g/common.hpp"

namespace p2g {

namespace detail {

inline uint32_t adler32(const std::vector<uint8_t>& data) {
    uint32_t a = 1, b = 0;
    for (uint8_t byte : data) {
        a = (a + byte) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline void put_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> head;
    put_be32(head, uint32_t(data.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
    uint32_t crc = crc32(type, 4);
    crc = crc32_update(crc, data.data(), data.size());
    std::vector<uint8_t> tail;
    put_be32(tail, crc);
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace detail

// rgb: row-major, 3 bytes per pixel
inline void write_png_rgb(const std::string& path, int width, int height,
                          const std::vector<uint8_t>& rgb) {
    if (int(rgb.size()) != width * height * 3) throw ShapeError("write_png_rgb: buffer size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_png_rgb: cannot open " + path);

    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    detail::put_be32(ihdr, uint32_t(width));
    detail::put_be32(ihdr, uint32_t(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::put_chunk(os, "IHDR", ihdr);

    // raw scanlines with filter byte 0
    std::vector<uint8_t> raw;
    raw.reserve(size_t(height) * (size_t(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), rgb.begin() + size_t(y) * size_t(width) * 3,
                   rgb.begin() + size_t(y + 1) * size_t(width) * 3);
    }

    std::vector<uint8_t> idat;
    idat.push_back(0x78);
    idat.push_back(0x01);
    size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        const size_t n = std::min<size_t>(65535, raw.size() - off);
        const bool final = off + n == raw.size();
        idat.push_back(final ? 1 : 0);
        idat.push_back(uint8_t(n & 0xff));
        idat.push_back(uint8_t(n >> 8));
        idat.push_back(uint8_t(~n & 0xff));
        idat.push_back(uint8_t((~n >> 8) & 0xff));
        idat.insert(idat.end(), raw.begin() + std::ptrdiff_t(off), raw.begin() + std::ptrdiff_t(off + n));
        off += n;
        if (final) break;
    }
    detail::put_be32(idat, detail::adler32(raw));
    detail::put_chunk(os, "IDAT", idat);
    detail::put_chunk(os, "IEND", {});
    if (!os) throw IoError("write_png_rgb: write failed");
}

}  // namespace p2g
