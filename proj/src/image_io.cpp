#include "fsa/image_io.hpp"

#include <fstream>

#include "fsa/errors.hpp"

namespace fsa {

namespace {

// reads one whitespace-delimited token, skipping '#' comments
std::string next_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok += static_cast<char>(c);
    }
    return tok;
}

int parse_dim(const std::string& tok, const std::string& path) {
    try {
        const int v = std::stoi(tok);
        if (v <= 0 || v > 1 << 16) throw std::out_of_range(tok);
        return v;
    } catch (const std::exception&) {
        throw IoError(path + ": malformed PPM header token '" + tok + "'");
    }
}

} // namespace

ImageU8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    if (next_token(is) != "P6") throw IoError(path + ": not a binary PPM (P6) file");
    ImageU8 img;
    img.width = parse_dim(next_token(is), path);
    img.height = parse_dim(next_token(is), path);
    const int maxval = parse_dim(next_token(is), path);
    if (maxval != 255) throw IoError(path + ": only maxval 255 PPM supported");
    const size_t n = 3 * static_cast<size_t>(img.width) * img.height;
    img.rgb.resize(n);
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n) throw IoError(path + ": truncated PPM pixel data");
    return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write image: " + path);
    os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    if (!os) throw IoError("short write on image: " + path);
}

void write_gray_ppm(const std::string& path, int width, int height,
                    const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(width) * height)
        throw ContractError("write_gray_ppm: pixel count mismatch");
    ImageU8 img;
    img.width = width;
    img.height = height;
    img.rgb.resize(gray.size() * 3);
    for (size_t i = 0; i < gray.size(); ++i) {
        img.rgb[3 * i] = gray[i];
        img.rgb[3 * i + 1] = gray[i];
        img.rgb[3 * i + 2] = gray[i];
    }
    write_ppm(path, img);
}

} // namespace fsa
