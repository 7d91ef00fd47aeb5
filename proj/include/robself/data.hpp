#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "robself/image_io.hpp"

namespace robself::data {

// LR source + HR guide (+ optional ground truth). Integer-format depth keeps
// raw stored counts; value_scale converts stored units to physical units.
struct ImagePair {
    Image source_lr;                 // {phi, h, w}
    Image guide_hr;                  // {psi, H, W}
    std::optional<Image> gt_hr;      // {phi, H, W}
    double value_scale = 1.0;
    std::string name;
    std::string modality;
    int source_maxval = 0;           // stored container maxval; 0 for float maps
    int guide_maxval = 0;
};

// Synthetic misalignment protocol: translation, rotation about the image
// center, and perspective shifts of the corners. Zero ranges give the exact
// identity homography.
struct MisalignSpec {
    double translation_px = 0.0;
    double rotation_deg = 0.0;
    double perspective_jitter = 0.0;  // corner displacement as a fraction of min(H,W)
    std::uint64_t seed = 0;
};

struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }
    Mat3 operator*(const Mat3& o) const;
    Mat3 inverse() const;  // throws ContractError when singular
    // projective application to (x, y, 1)
    std::array<double, 2> apply(double x, double y) const;
    bool is_identity() const;
};

// H = P·R·T with T uniform in ±translation, R uniform in ±rotation about the
// image center, P displacing the four corners by ±jitter·min(H,W). Seeded
// draws happen in a fixed order, so equal specs give equal matrices.
Mat3 random_homography(const MisalignSpec& spec, int width, int height);

// Inverse-mapping bilinear warp, out-of-frame samples replicate the border.
Image warp_homography(const Image& image, const Mat3& h);

// Average pooling by `factor`; shares the implementation with the loss
// downsampler, so a perfect prediction attains exactly zero data loss.
Image degrade(const Image& hr, int factor);

struct SyntheticPair {
    ImagePair pair;
    Mat3 homography;  // as applied to the aligned guide
};

SyntheticPair make_synthetic_pair(const Image& hr_source, const Image& hr_guide, const MisalignSpec& spec,
                                  int factor);

enum class Layout { realmis, flat };

// realmis group directory: source_lr.*, guide_x{f}.*, optional gt_x{f}.*,
// sidecar meta.txt with key=value entries (value_scale, modality).
ImagePair load_pair_realmis(const std::filesystem::path& dir, int sr_factor);
ImagePair load_pair_flat(const std::filesystem::path& source, const std::filesystem::path& guide,
                         const std::optional<std::filesystem::path>& gt, int sr_factor);

// Writes a synthetic pair as a realmis group (16-bit rasters of [0,1] data,
// value_scale 1/65535) plus homography.txt with the applied matrix.
void save_group(const std::filesystem::path& dir, const SyntheticPair& sp, int factor);

Mat3 load_homography(const std::filesystem::path& file);
void save_homography(const std::filesystem::path& file, const Mat3& h);

}  // namespace robself::data
