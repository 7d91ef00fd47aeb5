#include "robself/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace robself::data {

namespace {

// Skips PNM whitespace and '#' comment lines, then reads one token.
std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            break;
        }
    }
    while ((c = in.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
    if (tok.empty()) throw IoError("pnm: truncated header");
    return tok;
}

Image load_pnm(std::ifstream& in, const std::string& magic, ImageInfo* info) {
    const int channels = magic == "P6" ? 3 : 1;
    const int w = std::stoi(next_token(in));
    const int h = std::stoi(next_token(in));
    const int maxval = std::stoi(next_token(in));
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError("pnm: bad header");
    const bool wide = maxval > 255;
    const size_t count = static_cast<size_t>(channels) * w * h;
    std::vector<unsigned char> raw(count * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size()) throw IoError("pnm: truncated pixel data");

    Image img({channels, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                const size_t i = (static_cast<size_t>(y) * w + x) * channels + c;
                // 16-bit PNM samples are big-endian
                const unsigned v = wide ? (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
                img.at(c, y, x) = static_cast<double>(v);
            }
    if (info) *info = {maxval, channels, channels == 3 ? "ppm" : "pgm"};
    return img;
}

Image load_pfm(std::ifstream& in, const std::string& magic, ImageInfo* info) {
    const int channels = magic == "PF" ? 3 : 1;
    const int w = std::stoi(next_token(in));
    const int h = std::stoi(next_token(in));
    const double scale = std::stod(next_token(in));
    const bool little_endian = scale < 0.0;
    const size_t count = static_cast<size_t>(channels) * w * h;
    std::vector<unsigned char> raw(count * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size()) throw IoError("pfm: truncated pixel data");

    Image img({channels, h, w});
    for (int y = 0; y < h; ++y)  // PFM scanlines run bottom to top
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                const size_t i = (static_cast<size_t>(h - 1 - y) * w + x) * channels + c;
                std::uint32_t bits = 0;
                if (little_endian)
                    bits = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16)
                           | (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
                else
                    bits = raw[4 * i + 3] | (raw[4 * i + 2] << 8) | (raw[4 * i + 1] << 16)
                           | (static_cast<std::uint32_t>(raw[4 * i]) << 24);
                img.at(c, y, x) = static_cast<double>(std::bit_cast<float>(bits));
            }
    if (info) *info = {0, channels, "pfm"};
    return img;
}

}  // namespace

Image load_image(const std::filesystem::path& path, ImageInfo* info) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image file '" + path.string() + "'");
    std::string magic;
    magic.push_back(static_cast<char>(in.get()));
    magic.push_back(static_cast<char>(in.get()));
    if (magic == "P5" || magic == "P6") return load_pnm(in, magic, info);
    if (magic == "Pf" || magic == "PF") return load_pfm(in, magic, info);
    throw IoError("unsupported image format in '" + path.string() + "' (expected P5/P6/Pf/PF)");
}

void save_pnm(const std::filesystem::path& path, const Image& img, int maxval) {
    if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw IoError("save_pnm: expected 1 or 3 channels");
    if (maxval != 255 && maxval != 65535) throw IoError("save_pnm: maxval must be 255 or 65535");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image file '" + path.string() + "'");
    out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n" << maxval << "\n";
    const bool wide = maxval > 255;
    std::vector<unsigned char> raw(static_cast<size_t>(c) * h * w * (wide ? 2 : 1));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double v = std::round(img.at(ch, y, x));
                v = std::min(std::max(v, 0.0), static_cast<double>(maxval));
                const unsigned u = static_cast<unsigned>(v);
                const size_t i = (static_cast<size_t>(y) * w + x) * c + ch;
                if (wide) {
                    raw[2 * i] = static_cast<unsigned char>(u >> 8);
                    raw[2 * i + 1] = static_cast<unsigned char>(u & 0xff);
                } else {
                    raw[i] = static_cast<unsigned char>(u);
                }
            }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

void save_pfm(const std::filesystem::path& path, const Image& img) {
    if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw IoError("save_pfm: expected 1 or 3 channels");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image file '" + path.string() + "'");
    out << (c == 3 ? "PF" : "Pf") << "\n" << w << " " << h << "\n-1.0\n";
    std::vector<unsigned char> raw(static_cast<size_t>(c) * h * w * 4);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.at(ch, y, x)));
                const size_t i = (static_cast<size_t>(h - 1 - y) * w + x) * c + ch;
                raw[4 * i] = static_cast<unsigned char>(bits & 0xff);
                raw[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
                raw[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
                raw[4 * i + 3] = static_cast<unsigned char>(bits >> 24);
            }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

void save_image(const std::filesystem::path& path, const Image& img, int maxval) {
    const auto ext = path.extension().string();
    if (ext == ".pfm")
        save_pfm(path, img);
    else if (ext == ".pgm" || ext == ".ppm")
        save_pnm(path, img, maxval);
    else
        throw IoError("save_image: unsupported extension '" + ext + "'");
}

}  // namespace robself::data
