#include "robself/data.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <random>

#include "robself/ops.hpp"

namespace robself::data {

using diff::ContractError;

Mat3 Mat3::operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += m[static_cast<size_t>(3 * i + k)] * o.m[static_cast<size_t>(3 * k + j)];
            r.m[static_cast<size_t>(3 * i + j)] = s;
        }
    return r;
}

Mat3 Mat3::inverse() const {
    const auto& a = m;
    const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
                       a[2] * (a[3] * a[7] - a[4] * a[6]);
    if (std::abs(det) < 1e-12) throw ContractError("homography: matrix is singular");
    const double inv = 1.0 / det;
    Mat3 r;
    r.m = {(a[4] * a[8] - a[5] * a[7]) * inv, (a[2] * a[7] - a[1] * a[8]) * inv, (a[1] * a[5] - a[2] * a[4]) * inv,
           (a[5] * a[6] - a[3] * a[8]) * inv, (a[0] * a[8] - a[2] * a[6]) * inv, (a[2] * a[3] - a[0] * a[5]) * inv,
           (a[3] * a[7] - a[4] * a[6]) * inv, (a[1] * a[6] - a[0] * a[7]) * inv, (a[0] * a[4] - a[1] * a[3]) * inv};
    return r;
}

std::array<double, 2> Mat3::apply(double x, double y) const {
    const double w = m[6] * x + m[7] * y + m[8];
    const double g = std::abs(w) < 1e-12 ? 0.0 : 1.0 / w;
    return {(m[0] * x + m[1] * y + m[2]) * g, (m[3] * x + m[4] * y + m[5]) * g};
}

bool Mat3::is_identity() const {
    static constexpr std::array<double, 9> id{1, 0, 0, 0, 1, 0, 0, 0, 1};
    return m == id;
}

namespace {

double uniform_pm(std::mt19937_64& rng, double range) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
    return (2.0 * u - 1.0) * range;
}

// Direct linear transform for four point correspondences with h22 fixed at 1.
Mat3 homography_from_corners(const std::array<std::array<double, 2>, 4>& src,
                             const std::array<std::array<double, 2>, 4>& dst) {
    Eigen::Matrix<double, 8, 8> a = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = src[static_cast<size_t>(i)][0], y = src[static_cast<size_t>(i)][1];
        const double u = dst[static_cast<size_t>(i)][0], v = dst[static_cast<size_t>(i)][1];
        a(2 * i, 0) = x;
        a(2 * i, 1) = y;
        a(2 * i, 2) = 1;
        a(2 * i, 6) = -u * x;
        a(2 * i, 7) = -u * y;
        b(2 * i) = u;
        a(2 * i + 1, 3) = x;
        a(2 * i + 1, 4) = y;
        a(2 * i + 1, 5) = 1;
        a(2 * i + 1, 6) = -v * x;
        a(2 * i + 1, 7) = -v * y;
        b(2 * i + 1) = v;
    }
    const Eigen::Matrix<double, 8, 1> h = a.partialPivLu().solve(b);
    Mat3 r;
    for (int i = 0; i < 8; ++i) r.m[static_cast<size_t>(i)] = h(i);
    r.m[8] = 1.0;
    return r;
}

}  // namespace

Mat3 random_homography(const MisalignSpec& spec, int width, int height) {
    if (spec.translation_px < 0 || spec.rotation_deg < 0 || spec.perspective_jitter < 0)
        throw ContractError("misalign spec: ranges must be >= 0");
    std::mt19937_64 rng(spec.seed);
    const double tx = uniform_pm(rng, spec.translation_px);
    const double ty = uniform_pm(rng, spec.translation_px);
    const double theta = uniform_pm(rng, spec.rotation_deg) * std::numbers::pi / 180.0;
    const double jitter = spec.perspective_jitter * static_cast<double>(std::min(width, height));
    std::array<std::array<double, 2>, 4> disp;
    for (auto& d : disp) {
        d[0] = uniform_pm(rng, jitter);
        d[1] = uniform_pm(rng, jitter);
    }

    Mat3 t;
    t.m = {1, 0, tx, 0, 1, ty, 0, 0, 1};
    Mat3 r = Mat3::identity();
    if (theta != 0.0) {
        const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
        const double c = std::cos(theta), s = std::sin(theta);
        r.m = {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy, 0, 0, 1};
    }
    Mat3 p = Mat3::identity();
    if (jitter > 0.0) {
        const std::array<std::array<double, 2>, 4> corners{
            {{0.0, 0.0}, {width - 1.0, 0.0}, {width - 1.0, height - 1.0}, {0.0, height - 1.0}}};
        std::array<std::array<double, 2>, 4> moved;
        for (int i = 0; i < 4; ++i) {
            moved[static_cast<size_t>(i)][0] = corners[static_cast<size_t>(i)][0] + disp[static_cast<size_t>(i)][0];
            moved[static_cast<size_t>(i)][1] = corners[static_cast<size_t>(i)][1] + disp[static_cast<size_t>(i)][1];
        }
        p = homography_from_corners(corners, moved);
    }
    return p * r * t;
}

Image warp_homography(const Image& image, const Mat3& h) {
    if (image.rank() != 3) throw diff::DimensionError("warp_homography: expected {C,H,W}");
    if (h.is_identity()) return image;
    const Mat3 hinv = h.inverse();
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Image out({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const auto [sx, sy] = hinv.apply(static_cast<double>(x), static_cast<double>(y));
            const auto tap = diff::detail::make_tap(std::isfinite(sx) ? sx : 0.0, std::isfinite(sy) ? sy : 0.0, W, H);
            for (int c = 0; c < C; ++c)
                out.at(c, y, x) = diff::detail::sample_tap(image.data() + static_cast<std::int64_t>(c) * H * W, W, tap);
        }
    return out;
}

Image degrade(const Image& hr, int factor) { return diff::avg_pool_tensor(hr, factor); }

SyntheticPair make_synthetic_pair(const Image& hr_source, const Image& hr_guide, const MisalignSpec& spec,
                                  int factor) {
    if (hr_source.rank() != 3 || hr_guide.rank() != 3)
        throw diff::DimensionError("make_synthetic_pair: expected {C,H,W} inputs");
    if (hr_source.dim(1) != hr_guide.dim(1) || hr_source.dim(2) != hr_guide.dim(2))
        throw ContractError("make_synthetic_pair: source and guide extents must match");
    SyntheticPair sp;
    sp.homography = random_homography(spec, hr_source.dim(2), hr_source.dim(1));
    sp.pair.guide_hr = warp_homography(hr_guide, sp.homography);
    sp.pair.source_lr = degrade(hr_source, factor);
    sp.pair.gt_hr = hr_source;
    sp.pair.value_scale = 1.0;
    sp.pair.modality = "synthetic";
    return sp;
}

namespace {

std::filesystem::path find_with_extension(const std::filesystem::path& dir, const std::string& stem) {
    for (const char* ext : {".pgm", ".ppm", ".pfm"}) {
        auto p = dir / (stem + ext);
        if (std::filesystem::exists(p)) return p;
    }
    throw IoError("missing file '" + stem + ".{pgm,ppm,pfm}' in group '" + dir.string() + "'");
}

Image load_normalized(const std::filesystem::path& path, int* maxval = nullptr) {
    ImageInfo info;
    Image img = load_image(path, &info);
    if (info.maxval == 255) {
        for (std::int64_t i = 0; i < img.size(); ++i) img[i] /= 255.0;
    }
    // 16-bit stays in raw counts; PFM stays in raw values
    if (maxval) *maxval = info.maxval;
    return img;
}

void check_pair(const ImagePair& pair, int sr_factor) {
    const int h = pair.source_lr.dim(1), w = pair.source_lr.dim(2);
    const int H = pair.guide_hr.dim(1), W = pair.guide_hr.dim(2);
    if (H != h * sr_factor || W != w * sr_factor)
        throw ContractError("pair '" + pair.name + "': guide " + std::to_string(W) + "x" + std::to_string(H) +
                            " is not " + std::to_string(sr_factor) + "x the source " + std::to_string(w) + "x" +
                            std::to_string(h));
    if (pair.gt_hr) {
        if (pair.gt_hr->dim(1) != H || pair.gt_hr->dim(2) != W || pair.gt_hr->dim(0) != pair.source_lr.dim(0))
            throw ContractError("pair '" + pair.name + "': ground truth extents must match guide resolution");
    }
    if (!pair.source_lr.all_finite() || !pair.guide_hr.all_finite() || (pair.gt_hr && !pair.gt_hr->all_finite()))
        throw ContractError("pair '" + pair.name + "': non-finite pixel values");
    if (pair.modality == "depth") {
        for (std::int64_t i = 0; i < pair.source_lr.size(); ++i)
            if (pair.source_lr[i] < 0.0) throw ContractError("pair '" + pair.name + "': negative depth values");
    }
}

}  // namespace

ImagePair load_pair_realmis(const std::filesystem::path& dir, int sr_factor) {
    ImagePair pair;
    pair.name = dir.filename().string();
    const auto meta = dir / "meta.txt";
    if (std::filesystem::exists(meta)) {
        std::ifstream in(meta);
        std::string line;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq);
            std::string value = line.substr(eq + 1);
            auto strip = [](std::string& s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
            };
            strip(key);
            strip(value);
            if (key == "value_scale") pair.value_scale = std::stod(value);
            if (key == "modality") pair.modality = value;
        }
    }
    pair.source_lr = load_normalized(find_with_extension(dir, "source_lr"), &pair.source_maxval);
    const std::string suffix = "_x" + std::to_string(sr_factor);
    pair.guide_hr = load_normalized(find_with_extension(dir, "guide" + suffix), &pair.guide_maxval);
    for (const char* ext : {".pgm", ".ppm", ".pfm"}) {
        auto p = dir / ("gt" + suffix + ext);
        if (std::filesystem::exists(p)) {
            pair.gt_hr = load_normalized(p);
            break;
        }
    }
    check_pair(pair, sr_factor);
    return pair;
}

ImagePair load_pair_flat(const std::filesystem::path& source, const std::filesystem::path& guide,
                         const std::optional<std::filesystem::path>& gt, int sr_factor) {
    ImagePair pair;
    pair.name = source.stem().string();
    pair.source_lr = load_normalized(source, &pair.source_maxval);
    pair.guide_hr = load_normalized(guide, &pair.guide_maxval);
    if (gt) pair.gt_hr = load_normalized(*gt);
    check_pair(pair, sr_factor);
    return pair;
}

void save_group(const std::filesystem::path& dir, const SyntheticPair& sp, int factor) {
    std::filesystem::create_directories(dir);
    auto quantized = [](const Image& img) {
        Image q(img.shape());
        for (std::int64_t i = 0; i < img.size(); ++i) q[i] = img[i] * 65535.0;
        return q;
    };
    const std::string suffix = "_x" + std::to_string(factor);
    save_pnm(dir / "source_lr.pgm", quantized(sp.pair.source_lr), 65535);
    save_pnm(dir / ("guide" + suffix + (sp.pair.guide_hr.dim(0) == 3 ? ".ppm" : ".pgm")),
             quantized(sp.pair.guide_hr), 65535);
    if (sp.pair.gt_hr) save_pnm(dir / ("gt" + suffix + ".pgm"), quantized(*sp.pair.gt_hr), 65535);
    std::ofstream meta(dir / "meta.txt");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", 1.0 / 65535.0);
    meta << "value_scale=" << buf << "\n";
    meta << "modality=" << (sp.pair.modality.empty() ? "synthetic" : sp.pair.modality) << "\n";
    save_homography(dir / "homography.txt", sp.homography);
}

Mat3 load_homography(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open homography file '" + file.string() + "'");
    Mat3 h;
    for (auto& v : h.m)
        if (!(in >> v)) throw IoError("homography file '" + file.string() + "' must contain 9 numbers");
    return h;
}

void save_homography(const std::filesystem::path& file, const Mat3& h) {
    std::ofstream out(file);
    char buf[32];
    for (int i = 0; i < 9; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", h.m[static_cast<size_t>(i)]);
        out << buf << (i % 3 == 2 ? "\n" : " ");
    }
}

}  // namespace robself::data
