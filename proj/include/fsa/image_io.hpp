#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsa {

// 8-bit RGB, interleaved rows.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;

    uint8_t* at(int x, int y) { return rgb.data() + 3 * (static_cast<size_t>(y) * width + x); }
    const uint8_t* at(int x, int y) const {
        return rgb.data() + 3 * (static_cast<size_t>(y) * width + x);
    }
};

// Binary PPM (P6), maxval 255.
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

// Grayscale written as an equal-channel P6 so every viewer opens it.
void write_gray_ppm(const std::string& path, int width, int height,
                    const std::vector<uint8_t>& gray);

} // namespace fsa
