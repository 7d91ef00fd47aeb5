#pragma once

#include <filesystem>
#include <string>

#include "robself/tensor.hpp"

namespace robself::data {

using Image = diff::Tensor<double>;  // {C,H,W}

// Raster containers: binary PGM (P5) and PPM (P6) at 8 or 16 bit, and PFM
// (Pf/PF, little-endian) for real-valued data. Integer formats load as raw
// counts 0..maxval.
struct ImageInfo {
    int maxval = 0;       // 255, 65535, or 0 for PFM
    int channels = 0;
    std::string format;   // "pgm", "ppm", "pfm"
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

Image load_image(const std::filesystem::path& path, ImageInfo* info = nullptr);

// Quantizing writers round-and-clamp to [0, maxval].
void save_pnm(const std::filesystem::path& path, const Image& img, int maxval);
void save_pfm(const std::filesystem::path& path, const Image& img);

// Dispatch on extension: .pgm/.ppm quantized to `maxval`, .pfm exact float.
void save_image(const std::filesystem::path& path, const Image& img, int maxval = 65535);

}  // namespace robself::data
