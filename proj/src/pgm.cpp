#include "graphecho/pgm.hpp"

#include <fstream>

#include "graphecho/error.hpp"

namespace graphecho {

void write_pgm(const std::string& path, const uint8_t* pixels, int height, int width) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os << "P5\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels), std::streamsize(height) * width);
    if (!os) throw IoError("short write to " + path);
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw IoError(path + ": not a binary PGM (magic '" + magic + "')");
    auto next_int = [&]() {
        // skip whitespace and '#' comment lines
        int c = is.peek();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') is.ignore(1 << 20, '\n');
            else is.get();
            c = is.peek();
        }
        int v = -1;
        is >> v;
        if (!is || v < 0) throw IoError(path + ": malformed PGM header");
        return v;
    };
    PgmImage img;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    is.get();  // single whitespace after header
    img.pixels.resize(size_t(img.width) * size_t(img.height));
    is.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (is.gcount() != std::streamsize(img.pixels.size()))
        throw IoError(path + ": truncated pixel data");
    return img;
}

}  // namespace graphecho
