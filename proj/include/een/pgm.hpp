#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "een/common.hpp"

namespace een {

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

// Binary P5, 8-bit, maxval 255.
void pgm_write(const std::string& path, const PgmImage& img);
PgmImage pgm_read(const std::string& path);

// Maps row-major doubles in [-1, 1] to gray, clamping anything outside.
PgmImage to_pgm(const double* data, std::size_t height, std::size_t width);

}  // namespace een
