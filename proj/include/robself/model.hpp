#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "robself/config.hpp"
#include "robself/ops.hpp"

namespace robself::model {

using diff::ContractError;
using diff::DimensionError;
using diff::Node;
using diff::NodePtr;
using diff::Parameter;
using diff::Tensor;

constexpr int kDeformKernel = 3;  // fixed k for the deformable variant, N = 2k² = 18
constexpr double kLeakySlope = 0.1;

inline bool translator_enabled(AblationMode m) {
    return m == AblationMode::none || m == AblationMode::no_filter;
}
inline bool filter_enabled(AblationMode m) {
    return m == AblationMode::none || m == AblationMode::no_translator;
}

inline int deformation_channels(const RobSelfConfig& cfg) {
    return cfg.variant == Variant::Re ? 2 : 2 * kDeformKernel * kDeformKernel;
}

// All trainable parameters of one RobSelf instance plus its configuration.
// Construction is fully determined by (config, ablation, seed).
template <std::floating_point T>
struct ModelState {
    struct Conv {
        Parameter<T> w, b;
    };

    RobSelfConfig cfg;
    AblationMode ablation = AblationMode::none;

    Conv extract_src[2], extract_guide[2];
    std::vector<Conv> encoder, decoder;
    Conv offset_head;
    Parameter<T> deform_weight;
    Conv head_sr[2], head_trans[2];
    Conv fuse;

    std::vector<Parameter<T>> params;  // enumeration order; every parameter exactly once

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& p : params) n += p.node->value.size();
        return n;
    }

    static ModelState init(const RobSelfConfig& cfg, AblationMode ablation = AblationMode::none) {
        validate(cfg);
        ModelState s;
        s.cfg = cfg;
        s.ablation = ablation;
        std::mt19937_64 rng(cfg.seed);
        // 53-bit uniform in [0,1); independent of T so both precisions start
        // from the same underlying draw sequence
        auto uniform = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

        auto make_conv = [&](const std::string& name, int cout, int cin, int k, bool zero_init) {
            Tensor<T> w({cout, cin, k, k});
            if (!zero_init) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
                for (std::int64_t i = 0; i < w.size(); ++i)
                    w[i] = static_cast<T>((2.0 * uniform() - 1.0) * bound);
            }
            Conv c;
            c.w = Parameter<T>{diff::leaf(std::move(w), true), name + ".weight"};
            c.b = Parameter<T>{diff::leaf(Tensor<T>({cout}), true), name + ".bias"};
            s.params.push_back(c.w);
            s.params.push_back(c.b);
            return c;
        };

        const int C = cfg.channels_C;
        s.extract_src[0] = make_conv("extract.source.0", C, cfg.phi, 3, false);
        s.extract_src[1] = make_conv("extract.source.1", C, C, 3, false);
        s.extract_guide[0] = make_conv("extract.guide.0", C, cfg.psi, 3, false);
        s.extract_guide[1] = make_conv("extract.guide.1", C, C, 3, false);

        if (translator_enabled(ablation)) {
            for (int j = 0; j < cfg.level_i; ++j)
                s.encoder.push_back(make_conv("translator.encoder." + std::to_string(j), C, j == 0 ? 2 * C : C, 3, false));
            for (int j = 0; j < cfg.level_i; ++j) {
                const bool has_skip = j <= cfg.level_i - 2;
                s.decoder.push_back(
                    make_conv("translator.decoder." + std::to_string(j), C, has_skip ? 2 * C : C, 3, false));
            }
            // zero-init so optimization starts from the identity warp
            s.offset_head = make_conv("translator.offset_head", deformation_channels(cfg), C, 1, true);
            if (cfg.variant == Variant::De) {
                // identity taps: zero offsets reproduce the unwarped guide
                Tensor<T> w({C, C, kDeformKernel, kDeformKernel});
                const int c0 = (kDeformKernel - 1) / 2;
                for (int c = 0; c < C; ++c) w.at4(c, c, c0, c0) = T(1);
                s.deform_weight = Parameter<T>{diff::leaf(std::move(w), true), "translator.deform.weight"};
                s.params.push_back(s.deform_weight);
            }
        }
        if (!filter_enabled(ablation)) s.fuse = make_conv("fuse", C, 2 * C, 1, false);

        const bool separate = cfg.separate_heads && translator_enabled(ablation);
        s.head_sr[0] = make_conv(separate ? "head.sr.0" : "head.0", C, C, 3, false);
        s.head_sr[1] = make_conv(separate ? "head.sr.1" : "head.1", cfg.phi, C, 3, false);
        if (separate) {
            s.head_trans[0] = make_conv("head.trans.0", C, C, 3, false);
            s.head_trans[1] = make_conv("head.trans.1", cfg.phi, C, 3, false);
        } else {
            s.head_trans[0] = s.head_sr[0];
            s.head_trans[1] = s.head_sr[1];
        }
        return s;
    }
};

namespace detail {

template <std::floating_point T>
NodePtr<T> conv_block(const NodePtr<T>& x, const typename ModelState<T>::Conv& c, int stride, int padding) {
    return diff::conv2d(x, c.w.node, c.b.node, stride, padding);
}

}  // namespace detail

// Replaces the zero offset-head initialization with small fractional values.
// The identity warp puts every sampling coordinate exactly on the bilinear
// interpolation kinks; gradient-check suites call this first so finite
// differences probe smooth points.
template <std::floating_point T>
void perturb_offset_head(ModelState<T>& state, std::uint64_t seed) {
    if (!translator_enabled(state.ablation)) return;
    std::mt19937_64 rng(seed);
    auto uniform = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    Tensor<T>& w = state.offset_head.w.node->value;
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>((2.0 * uniform() - 1.0) * 0.05);
    Tensor<T>& b = state.offset_head.b.node->value;
    for (std::int64_t i = 0; i < b.size(); ++i) b[i] = static_cast<T>(0.15 + 0.2 * uniform());
}

// Two 3x3 convolutions per modality with a leaky rectifier between.
template <std::floating_point T>
std::pair<NodePtr<T>, NodePtr<T>> extract_features(const Tensor<T>& up_source, const Tensor<T>& guide,
                                                   const ModelState<T>& state) {
    if (up_source.rank() != 3 || guide.rank() != 3)
        throw DimensionError("extract_features: expected rank-3 inputs");
    if (up_source.dim(1) != guide.dim(1) || up_source.dim(2) != guide.dim(2))
        throw ContractError("extract_features: source must be upsampled to guide extents, got " +
                            up_source.shape_string() + " vs " + guide.shape_string());
    if (up_source.dim(0) != state.cfg.phi || guide.dim(0) != state.cfg.psi)
        throw ContractError("extract_features: channel counts must match configured phi/psi");
    const T slope = static_cast<T>(kLeakySlope);
    auto src = diff::constant(up_source);
    auto gd = diff::constant(guide);
    auto f_src = detail::conv_block(diff::leaky_relu(detail::conv_block(src, state.extract_src[0], 1, 1), slope),
                                    state.extract_src[1], 1, 1);
    auto f_gd = detail::conv_block(diff::leaky_relu(detail::conv_block(gd, state.extract_guide[0], 1, 1), slope),
                                   state.extract_guide[1], 1, 1);
    return {f_src, f_gd};
}

// Multi-level encoder/decoder over the concatenated features; each encoder
// stage halves the resolution, each decoder stage doubles it, with skip
// connections from the matching encoder stage. A zero-initialized 1x1 head
// maps to the N offset channels.
template <std::floating_point T>
NodePtr<T> estimate_deformation(const NodePtr<T>& f_source, const NodePtr<T>& f_guide, const ModelState<T>& state) {
    const int li = state.cfg.level_i;
    const int H = f_source->value.dim(1), W = f_source->value.dim(2);
    const int mult = 1 << li;
    if (H % mult != 0 || W % mult != 0)
        throw ContractError("estimate_deformation: extents " + std::to_string(H) + "x" + std::to_string(W) +
                            " must be divisible by " + std::to_string(mult) + " (level_i=" + std::to_string(li) + ")");
    const T slope = static_cast<T>(kLeakySlope);
    auto x = diff::concat_channels(f_source, f_guide);
    std::vector<NodePtr<T>> enc(static_cast<size_t>(li));
    for (int j = 0; j < li; ++j) {
        x = diff::leaky_relu(detail::conv_block(x, state.encoder[static_cast<size_t>(j)], 2, 1), slope);
        enc[static_cast<size_t>(j)] = x;
    }
    for (int j = 0; j < li; ++j) {
        const int oh = H >> (li - 1 - j), ow = W >> (li - 1 - j);
        x = diff::bilinear_resize(x, oh, ow);
        const int skip = li - 2 - j;  // encoder stage at the same resolution
        if (skip >= 0) x = diff::concat_channels(x, enc[static_cast<size_t>(skip)]);
        x = diff::leaky_relu(detail::conv_block(x, state.decoder[static_cast<size_t>(j)], 1, 1), slope);
    }
    auto raw = detail::conv_block(x, state.offset_head, 1, 0);
    // Bound the field softly at an eighth of the frame. Unbounded offsets
    // admit a degenerate optimum early in training: warping far enough that
    // border replication flattens the aligned feature. The rational bound
    // keeps zero exactly zero, caps the damage, and keeps gradients alive at
    // saturation so the field can come back once alignment pays off.
    const T bound = static_cast<T>(std::max(4, std::min(H, W) / 8));
    return diff::soft_bound(raw, bound);
}

// Warps the guide feature by the deformation field: spatial resampling for
// the Re variant, deformable convolution for De.
template <std::floating_point T>
NodePtr<T> align_guide(const NodePtr<T>& f_guide, const NodePtr<T>& field, const ModelState<T>& state) {
    const int expected = deformation_channels(state.cfg);
    if (field->value.dim(0) != expected)
        throw ContractError("align_guide: field has " + std::to_string(field->value.dim(0)) + " channels, variant " +
                            variant_name(state.cfg.variant) + " requires " + std::to_string(expected));
    if (state.cfg.variant == Variant::Re) return diff::grid_sample(f_guide, field);
    return diff::deform_conv2d(f_guide, state.deform_weight.node, field);
}

// Mean per-channel Sobel gradient magnitude; selector state only, never
// backpropagated through.
template <std::floating_point T>
Tensor<T> importance_map(const Tensor<T>& f_source) {
    if (f_source.rank() != 3) throw DimensionError("importance_map: expected {C,H,W}");
    const int C = f_source.dim(0), H = f_source.dim(1), W = f_source.dim(2);
    Tensor<T> map({H, W});
    for (int c = 0; c < C; ++c) {
        const T* p = f_source.data() + static_cast<std::int64_t>(c) * H * W;
        auto at = [&](int y, int x) {
            return p[static_cast<std::int64_t>(diff::detail::clampi(y, 0, H - 1)) * W +
                     diff::detail::clampi(x, 0, W - 1)];
        };
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                // grouped column/row sums cancel exactly on constant input
                const T right = at(y - 1, x + 1) + T(2) * at(y, x + 1) + at(y + 1, x + 1);
                const T left = at(y - 1, x - 1) + T(2) * at(y, x - 1) + at(y + 1, x - 1);
                const T below = at(y + 1, x - 1) + T(2) * at(y + 1, x) + at(y + 1, x + 1);
                const T above = at(y - 1, x - 1) + T(2) * at(y - 1, x) + at(y - 1, x + 1);
                const T gx = right - left;
                const T gy = below - above;
                map[static_cast<std::int64_t>(y) * W + x] += std::sqrt(gx * gx + gy * gy);
            }
    }
    const T inv = T(1) / static_cast<T>(C);
    for (std::int64_t i = 0; i < map.size(); ++i) map[i] *= inv;
    return map;
}

template <std::floating_point T>
T importance_threshold(const Tensor<T>& map, T eta) {
    if (!(eta > T(0))) throw ContractError("importance_threshold: eta must be > 0");
    return eta * map.mean();
}

// Content-aware reference filter: per pixel, softmax weights over the source
// neighborhood from correlation with the aligned-guide pixel; the output is
// the weighted source neighborhood average. Kernel side is m where the
// importance map exceeds tau (strictly), n otherwise; no tau means m
// everywhere. Gradients flow to the source (values and logits) and to the
// reference (logits).
template <std::floating_point T>
NodePtr<T> reference_filter(const NodePtr<T>& f_source, const NodePtr<T>& f_aligned, const Tensor<T>& importance,
                            std::optional<std::type_identity_t<T>> tau, int m, int n) {
    const Tensor<T>& src = f_source->value;
    const Tensor<T>& ref = f_aligned->value;
    if (m % 2 == 0 || n % 2 == 0) throw ContractError("reference_filter: kernel sizes must be odd");
    if (m < n) throw ContractError("reference_filter: requires m >= n");
    diff::ensure_same_shape(src, ref, "reference_filter");
    const int C = src.dim(0), H = src.dim(1), W = src.dim(2);
    if (importance.rank() != 2 || importance.dim(0) != H || importance.dim(1) != W)
        throw DimensionError("reference_filter: importance map must be {H,W}");

    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const int mm = m * m;

    // pixel-major copies for contiguous channel dots
    auto transpose_to_pixel_major = [&](const Tensor<T>& t, std::vector<T>& out) {
        out.resize(static_cast<size_t>(hw) * C);
        for (int c = 0; c < C; ++c) {
            const T* p = t.data() + static_cast<std::int64_t>(c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) out[static_cast<size_t>(i) * C + c] = p[i];
        }
    };
    auto srcT = std::make_shared<std::vector<T>>();
    auto refT = std::make_shared<std::vector<T>>();
    transpose_to_pixel_major(src, *srcT);
    transpose_to_pixel_major(ref, *refT);

    auto sizes = std::make_shared<std::vector<std::uint8_t>>(static_cast<size_t>(hw));
    for (std::int64_t i = 0; i < hw; ++i)
        (*sizes)[static_cast<size_t>(i)] =
            static_cast<std::uint8_t>(!tau ? m : (importance[i] > *tau ? m : n));

    auto weights = std::make_shared<std::vector<T>>(static_cast<size_t>(hw) * mm);
    std::vector<T> outT(static_cast<size_t>(hw) * C);

#ifdef _OPENMP
#pragma omp parallel for num_threads(robself::max_threads()) schedule(static)
#endif
    for (int y = 0; y < H; ++y) {
        std::vector<T> logits(static_cast<size_t>(mm));
        std::vector<std::int64_t> nbr(static_cast<size_t>(mm));
        for (int x = 0; x < W; ++x) {
            const std::int64_t i = static_cast<std::int64_t>(y) * W + x;
            const int s = (*sizes)[static_cast<size_t>(i)];
            const int r = (s - 1) / 2;
            const int count = s * s;
            const T* refp = refT->data() + static_cast<size_t>(i) * C;
            int idx = 0;
            T maxlogit = -std::numeric_limits<T>::infinity();
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx, ++idx) {
                    const int yy = diff::detail::clampi(y + dy, 0, H - 1);
                    const int xx = diff::detail::clampi(x + dx, 0, W - 1);
                    const std::int64_t l = static_cast<std::int64_t>(yy) * W + xx;
                    nbr[static_cast<size_t>(idx)] = l;
                    const T* sp = srcT->data() + static_cast<size_t>(l) * C;
                    T dot = 0;
                    for (int c = 0; c < C; ++c) dot += sp[c] * refp[c];
                    logits[static_cast<size_t>(idx)] = dot;
                    maxlogit = std::max(maxlogit, dot);
                }
            T denom = 0;
            T* wp = weights->data() + static_cast<size_t>(i) * mm;
            for (int l = 0; l < count; ++l) {
                wp[l] = std::exp(logits[static_cast<size_t>(l)] - maxlogit);
                denom += wp[l];
            }
            const T inv = T(1) / denom;
            T* op = outT.data() + static_cast<size_t>(i) * C;
            for (int l = 0; l < count; ++l) {
                wp[l] *= inv;
                const T* sp = srcT->data() + static_cast<size_t>(nbr[static_cast<size_t>(l)]) * C;
                for (int c = 0; c < C; ++c) op[c] += wp[l] * sp[c];
            }
        }
    }

    Tensor<T> out({C, H, W});
    for (int c = 0; c < C; ++c) {
        T* p = out.data() + static_cast<std::int64_t>(c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] = outT[static_cast<size_t>(i) * C + c];
    }

    auto backprop = [srcT, refT, sizes, weights, mm, C, H, W, hw](Node<T>& self) {
        auto& srcp = self.parents[0];
        auto& refp = self.parents[1];
        const bool need_src = srcp->requires_grad;
        const bool need_ref = refp->requires_grad;
        if (!need_src && !need_ref) return;

        std::vector<T> gsrcT(need_src ? static_cast<size_t>(hw) * C : 0, T(0));
        std::vector<T> grefT(need_ref ? static_cast<size_t>(hw) * C : 0, T(0));
        std::vector<T> goutPix(static_cast<size_t>(C));
        std::vector<T> gdots(static_cast<size_t>(mm));
        std::vector<std::int64_t> nbr(static_cast<size_t>(mm));

        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::int64_t i = static_cast<std::int64_t>(y) * W + x;
                const int s = (*sizes)[static_cast<size_t>(i)];
                const int r = (s - 1) / 2;
                const int count = s * s;
                for (int c = 0; c < C; ++c) goutPix[static_cast<size_t>(c)] = self.grad.at(c, y, x);
                const T* wp = weights->data() + static_cast<size_t>(i) * mm;
                const T* refv = refT->data() + static_cast<size_t>(i) * C;

                int idx = 0;
                T S = 0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx, ++idx) {
                        const int yy = diff::detail::clampi(y + dy, 0, H - 1);
                        const int xx = diff::detail::clampi(x + dx, 0, W - 1);
                        const std::int64_t l = static_cast<std::int64_t>(yy) * W + xx;
                        nbr[static_cast<size_t>(idx)] = l;
                        const T* sp = srcT->data() + static_cast<size_t>(l) * C;
                        T d = 0;
                        for (int c = 0; c < C; ++c) d += goutPix[static_cast<size_t>(c)] * sp[c];
                        gdots[static_cast<size_t>(idx)] = d;
                        S += wp[idx] * d;
                    }
                for (int l = 0; l < count; ++l) {
                    const T glogit = wp[l] * (gdots[static_cast<size_t>(l)] - S);
                    const std::int64_t nl = nbr[static_cast<size_t>(l)];
                    const T* sp = srcT->data() + static_cast<size_t>(nl) * C;
                    if (need_src) {
                        T* gp = gsrcT.data() + static_cast<size_t>(nl) * C;
                        for (int c = 0; c < C; ++c)
                            gp[c] += wp[l] * goutPix[static_cast<size_t>(c)] + glogit * refv[c];
                    }
                    if (need_ref) {
                        T* gp = grefT.data() + static_cast<size_t>(i) * C;
                        for (int c = 0; c < C; ++c) gp[c] += glogit * sp[c];
                    }
                }
            }

        if (need_src) {
            Tensor<T>& g = srcp->ensure_grad();
            for (int c = 0; c < C; ++c) {
                T* p = g.data() + static_cast<std::int64_t>(c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) p[i] += gsrcT[static_cast<size_t>(i) * C + c];
            }
        }
        if (need_ref) {
            Tensor<T>& g = refp->ensure_grad();
            for (int c = 0; c < C; ++c) {
                T* p = g.data() + static_cast<std::int64_t>(c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) p[i] += grefT[static_cast<size_t>(i) * C + c];
            }
        }
    };
    return diff::make_node<T>(std::move(out), {f_source, f_aligned}, std::move(backprop), "reference_filter");
}

enum class Head { translation, sr };

// Two 3x3 convolutions mapping C -> C -> phi, leaky rectifier between, no
// residual connection. Shared parameter set across branches unless the
// configuration asks for separate heads.
template <std::floating_point T>
NodePtr<T> predict(const NodePtr<T>& feature, Head head, const ModelState<T>& state) {
    const auto& h = (head == Head::sr) ? state.head_sr : state.head_trans;
    const T slope = static_cast<T>(kLeakySlope);
    return detail::conv_block(diff::leaky_relu(detail::conv_block(feature, h[0], 1, 1), slope), h[1], 1, 1);
}

template <std::floating_point T>
struct Diagnostics {
    Tensor<T> f_aligned;        // empty when the translator is ablated
    Tensor<T> field;            // deformation field value (N x H x W)
    Tensor<T> importance;       // empty when the filter is ablated
    std::optional<T> tau;
    double large_kernel_fraction = 0.0;
};

template <std::floating_point T>
struct ForwardResult {
    NodePtr<T> sr;
    NodePtr<T> trans;  // null when the translator is ablated
    Diagnostics<T> diag;
};

// Full pipeline: upsample source, extract, estimate deformation, align,
// importance/threshold, filter, predict both branches.
template <std::floating_point T>
ForwardResult<T> forward(const Tensor<T>& source_lr, const Tensor<T>& guide, const ModelState<T>& state) {
    const RobSelfConfig& cfg = state.cfg;
    if (source_lr.rank() != 3 || guide.rank() != 3) throw DimensionError("forward: expected rank-3 inputs");
    const int H = guide.dim(1), W = guide.dim(2);
    if (source_lr.dim(1) * cfg.sr_factor != H || source_lr.dim(2) * cfg.sr_factor != W)
        throw ContractError("forward: guide extents must be sr_factor x source extents, got " +
                            source_lr.shape_string() + " vs " + guide.shape_string() + " at factor " +
                            std::to_string(cfg.sr_factor));

    Tensor<T> up_source = diff::bilinear_resize(source_lr, H, W);
    auto [f_source, f_guide] = extract_features(up_source, guide, state);

    ForwardResult<T> result;
    NodePtr<T> reference = f_guide;
    if (translator_enabled(state.ablation)) {
        auto field = estimate_deformation(f_source, f_guide, state);
        reference = align_guide(f_guide, field, state);
        result.diag.f_aligned = reference->value;
        result.diag.field = field->value;
    }

    NodePtr<T> sr_feature;
    if (filter_enabled(state.ablation)) {
        Tensor<T> imp = importance_map(f_source->value);
        std::optional<T> tau;
        if (cfg.eta) tau = importance_threshold(imp, static_cast<T>(*cfg.eta));
        sr_feature = reference_filter(f_source, reference, imp, tau, cfg.kernel_m, cfg.kernel_n);
        if (tau) {
            std::int64_t above = 0;
            for (std::int64_t i = 0; i < imp.size(); ++i)
                if (imp[i] > *tau) ++above;
            result.diag.large_kernel_fraction = static_cast<double>(above) / static_cast<double>(imp.size());
        } else {
            result.diag.large_kernel_fraction = 1.0;
        }
        result.diag.tau = tau;
        result.diag.importance = std::move(imp);
    } else {
        sr_feature = detail::conv_block(diff::concat_channels(f_source, reference), state.fuse, 1, 0);
    }

    result.sr = predict(sr_feature, Head::sr, state);
    if (translator_enabled(state.ablation)) result.trans = predict(reference, Head::translation, state);
    return result;
}

}  // namespace robself::model
