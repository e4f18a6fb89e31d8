#include "dualseg/image.hpp"

#include <fstream>

namespace dualseg {

void write_pnm(const std::filesystem::path& path, const Image8& img) {
    if (img.c != 1 && img.c != 3)
        throw DataError("write_pnm: unsupported channel count " + std::to_string(img.c));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_pnm: cannot open " + path.string());
    out << (img.c == 3 ? "P6" : "P5") << "\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!out) throw DataError("write_pnm: write failed for " + path.string());
}

namespace {

int next_token(std::istream& in, const std::filesystem::path& path) {
    // Skips whitespace and '#' comments between header fields.
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (std::isspace(ch)) {
            ch = in.get();
        } else {
            break;
        }
    }
    if (ch == EOF) throw DataError("read_pnm: truncated header in " + path.string());
    int value = 0;
    bool any = false;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        any = true;
        ch = in.get();
    }
    if (!any) throw DataError("read_pnm: malformed header in " + path.string());
    return value;
}

}  // namespace

Image8 read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_pnm: cannot open " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    int channels = 0;
    if (magic[0] == 'P' && magic[1] == '5')
        channels = 1;
    else if (magic[0] == 'P' && magic[1] == '6')
        channels = 3;
    else
        throw DataError("read_pnm: " + path.string() + " is not a binary P5/P6 file");
    const int w = next_token(in, path);
    const int h = next_token(in, path);
    const int maxval = next_token(in, path);
    if (maxval != 255) throw DataError("read_pnm: unsupported maxval in " + path.string());
    Image8 img(w, h, channels);
    in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
        throw DataError("read_pnm: truncated pixel data in " + path.string());
    return img;
}

}  // namespace dualseg
