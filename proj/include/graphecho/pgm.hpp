#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace graphecho {

struct PgmImage {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;  // row-major
};

// binary (P5) 8-bit grayscale
void write_pgm(const std::string& path, const uint8_t* pixels, int height, int width);
PgmImage read_pgm(const std::string& path);

}  // namespace graphecho
