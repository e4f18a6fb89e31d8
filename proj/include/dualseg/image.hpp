#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dualseg/common.hpp"

namespace dualseg {

// Interleaved row-major 8-bit image; c is 1 (grayscale/mask) or 3 (RGB).
// Binary masks use values {0, 255} in a 1-channel image.
struct Image8 {
    int w = 0, h = 0, c = 0;
    std::vector<uint8_t> px;

    Image8() = default;
    Image8(int width, int height, int channels, uint8_t fill = 0)
        : w(width), h(height), c(channels),
          px(static_cast<size_t>(width) * height * channels, fill) {}

    uint8_t& at(int x, int y, int ch = 0) { return px[(static_cast<size_t>(y) * w + x) * c + ch]; }
    uint8_t at(int x, int y, int ch = 0) const {
        return px[(static_cast<size_t>(y) * w + x) * c + ch];
    }

    bool same_dims(const Image8& o) const { return w == o.w && h == o.h && c == o.c; }
    std::string dims_str() const {
        return std::to_string(w) + "x" + std::to_string(h) + "x" + std::to_string(c);
    }
};

using Mask = Image8;  // 1-channel, values {0,255}

// Binary PNM IO: P6 for 3-channel, P5 for 1-channel, maxval 255.
void write_pnm(const std::filesystem::path& path, const Image8& img);
Image8 read_pnm(const std::filesystem::path& path);

}  // namespace dualseg
