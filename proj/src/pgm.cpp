#include <algorithm>
#include <cmath>
#include <fstream>

#include "een/pgm.hpp"

namespace een {

void pgm_write(const std::string& path, const PgmImage& img) {
    if (img.pixels.size() != img.width * img.height)
        throw DataError("pgm: pixel count does not match " + std::to_string(img.width) + "x" +
                        std::to_string(img.height));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("pgm: cannot open '" + path + "' for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw DataError("pgm: write to '" + path + "' failed");
}

PgmImage pgm_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("pgm: cannot open '" + path + "'");
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255)
        throw DataError("pgm: '" + path + "' is not an 8-bit binary PGM");
    in.get();  // single whitespace byte after the header
    PgmImage img{w, h, std::vector<std::uint8_t>(w * h)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(w * h));
    if (static_cast<std::size_t>(in.gcount()) != w * h)
        throw DataError("pgm: truncated pixel data in '" + path + "'");
    return img;
}

PgmImage to_pgm(const double* data, std::size_t height, std::size_t width) {
    PgmImage img{width, height, std::vector<std::uint8_t>(width * height)};
    for (std::size_t i = 0; i < width * height; ++i) {
        const double v = std::clamp(data[i], -1.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
    return img;
}

}  // namespace een
