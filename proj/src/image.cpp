#include "ect/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace ect {

void write_pgm(const PermittivityImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
    std::vector<unsigned char> row(img.width());
    for (int r = 0; r < img.height(); ++r) {
        for (int c = 0; c < img.width(); ++c) {
            double v = img.at(r, c);
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            row[c] = static_cast<unsigned char>(std::lround(255.0 * v));
        }
        out.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!out) throw FormatError("write failed: " + path);
}

PermittivityImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError("not a binary PGM (P5): " + path);
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0) throw FormatError("bad PGM header: " + path);
    if (maxval != 255) throw FormatError("unsupported PGM maxval: " + path);
    in.get();  // single whitespace after header
    PermittivityImage img(h, w);
    std::vector<unsigned char> row(w);
    for (int r = 0; r < h; ++r) {
        in.read(reinterpret_cast<char*>(row.data()), row.size());
        if (!in)
            throw FormatError("truncated PGM: " + path,
                              static_cast<std::size_t>(in.gcount()));
        for (int c = 0; c < w; ++c) img.at(r, c) = row[c] / 255.0;
    }
    return img;
}

}  // namespace ect
