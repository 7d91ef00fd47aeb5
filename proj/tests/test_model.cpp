#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "robself/gradcheck.hpp"
#include "robself/model.hpp"
#include "support/oracles.hpp"

using namespace robself;
using namespace robself::model;
using oracle::random_tensor;
using Img = diff::Tensor<double>;

namespace {

bool bitwise_equal(const Img& a, const Img& b) {
    if (!a.same_shape(b)) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double max_abs_diff(const Img& a, const Img& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

RobSelfConfig small_config(Variant v = Variant::Re) {
    RobSelfConfig cfg;
    cfg.variant = v;
    cfg.level_i = 2;
    cfg.channels_C = 8;
    cfg.kernel_m = 3;
    cfg.kernel_n = 3;
    cfg.sr_factor = 2;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("presets reproduce the task hyperparameters") {
    auto c = preset("syn-depth-x4");
    CHECK(c.level_i == 4);
    CHECK(c.kernel_m == 7);
    CHECK(c.kernel_n == 5);
    CHECK(c.eta == 0.7);
    CHECK(c.sr_factor == 4);
    CHECK_FALSE(c.separate_heads);

    c = preset("syn-depth-x8");
    CHECK(c.level_i == 5);
    CHECK(c.kernel_m == 13);
    CHECK(c.kernel_n == 7);
    CHECK(c.eta == 0.7);
    CHECK(c.sr_factor == 8);

    c = preset("real-depth-x2");
    CHECK(c.level_i == 3);
    CHECK(c.kernel_m == 7);
    CHECK(c.kernel_n == 5);
    CHECK(c.sr_factor == 2);

    c = preset("real-depth-x4");
    CHECK(c.level_i == 4);
    CHECK(c.sr_factor == 4);

    c = preset("real-nir-x2");
    CHECK(c.level_i == 4);
    CHECK(c.kernel_m == 3);
    CHECK(c.kernel_n == 3);
    CHECK_FALSE(c.eta.has_value());
    CHECK(c.separate_heads);

    c = preset("real-nir-x4");
    CHECK(c.level_i == 5);
    CHECK_FALSE(c.eta.has_value());
    CHECK(c.separate_heads);

    for (const auto& name : preset_names()) {
        auto p = preset(name);
        CHECK(p.lambda == 1.0);
        CHECK(p.iterations == 1000);
        CHECK(p.lr_init == 0.002);
        CHECK(p.lr_decay == 0.9998);
        CHECK(p.lr_decay_every == 5);
    }
    CHECK_THROWS_AS(preset("syn-depth-x16"), diff::ContractError);
}

TEST_CASE("config validation and round trip") {
    RobSelfConfig bad;
    bad.kernel_m = 4;
    CHECK_THROWS_AS(validate(bad), diff::ContractError);
    bad = RobSelfConfig{};
    bad.kernel_n = 9;  // m < n
    CHECK_THROWS_AS(validate(bad), diff::ContractError);
    bad = RobSelfConfig{};
    bad.sr_factor = 3;
    CHECK_THROWS_AS(validate(bad), diff::ContractError);
    bad = RobSelfConfig{};
    bad.eta = -1.0;
    CHECK_THROWS_AS(validate(bad), diff::ContractError);

    auto c = preset("real-nir-x4");
    c.seed = 123;
    c.variant = Variant::De;
    std::istringstream in(dump_config(c));
    auto back = parse_config(in);
    CHECK(back.level_i == c.level_i);
    CHECK(back.eta == c.eta);
    CHECK(back.separate_heads == c.separate_heads);
    CHECK(back.seed == 123);
    CHECK(back.variant == Variant::De);
}

TEST_CASE("parameter counts stay under two million for every preset") {
    for (const auto& name : preset_names())
        for (auto v : {Variant::Re, Variant::De}) {
            auto cfg = preset(name);
            cfg.variant = v;
            auto state = ModelState<double>::init(cfg);
            CHECK(state.parameter_count() < 2'000'000);
            CHECK(state.parameter_count() > 0);
        }
}

TEST_CASE("parameter names are unique and enumeration is stable") {
    auto cfg = preset("real-nir-x2");  // separate heads
    auto state = ModelState<double>::init(cfg);
    std::set<std::string> names;
    for (const auto& p : state.params) names.insert(p.name);
    CHECK(names.size() == state.params.size());
    CHECK(names.count("head.sr.0.weight") == 1);
    CHECK(names.count("head.trans.0.weight") == 1);

    auto shared = ModelState<double>::init(preset("real-depth-x2"));
    std::set<std::string> shared_names;
    for (const auto& p : shared.params) shared_names.insert(p.name);
    CHECK(shared_names.count("head.0.weight") == 1);
    CHECK(shared_names.count("head.trans.0.weight") == 0);
}

TEST_CASE("model state init is deterministic and variant-aware") {
    auto cfg = small_config(Variant::De);
    auto a = ModelState<double>::init(cfg);
    auto b = ModelState<double>::init(cfg);
    REQUIRE(a.params.size() == b.params.size());
    for (size_t i = 0; i < a.params.size(); ++i)
        CHECK(bitwise_equal(a.params[i].node->value, b.params[i].node->value));

    // offset head zero, deform weight identity taps
    CHECK(a.offset_head.w.node->value.sum() == 0.0);
    CHECK(a.offset_head.b.node->value.sum() == 0.0);
    CHECK(a.deform_weight.node->value.sum() == doctest::Approx(cfg.channels_C));
}

TEST_CASE("extract_features shape contract and zero propagation") {
    RobSelfConfig cfg;
    cfg.phi = 1;
    cfg.psi = 3;
    cfg.channels_C = 32;
    cfg.seed = 2;
    auto state = ModelState<double>::init(cfg);
    auto [fs, fg] = extract_features(Img({1, 64, 64}), Img({3, 64, 64}), state);
    CHECK(fs->value.shape() == std::vector<int>{32, 64, 64});
    CHECK(fg->value.shape() == std::vector<int>{32, 64, 64});
    // zero inputs with zero biases give zero features
    CHECK(fs->value.sum() == 0.0);
    CHECK(fg->value.sum() == 0.0);

    auto [fs2, fg2] = extract_features(Img({1, 64, 64}), Img({3, 64, 64}), state);
    CHECK(bitwise_equal(fs->value, fs2->value));

    CHECK_THROWS_AS(extract_features(Img({1, 32, 64}), Img({3, 64, 64}), state), diff::ContractError);
}

TEST_CASE("estimate_deformation shape, zero init, and divisibility contract") {
    RobSelfConfig cfg;
    cfg.level_i = 4;
    cfg.channels_C = 8;
    cfg.seed = 3;
    auto state = ModelState<double>::init(cfg);
    auto fs = diff::leaf(random_tensor({8, 64, 64}, 7), false);
    auto fg = diff::leaf(random_tensor({8, 64, 64}, 8), false);
    auto field = estimate_deformation(fs, fg, state);
    CHECK(field->value.shape() == std::vector<int>{2, 64, 64});
    for (std::int64_t i = 0; i < field->value.size(); ++i) CHECK(field->value[i] == 0.0);

    cfg.level_i = 3;
    auto state3 = ModelState<double>::init(cfg);
    auto fs60 = diff::leaf(random_tensor({8, 60, 64}, 9), false);
    auto fg60 = diff::leaf(random_tensor({8, 60, 64}, 10), false);
    try {
        estimate_deformation(fs60, fg60, state3);
        FAIL("expected contract error");
    } catch (const diff::ContractError& e) {
        CHECK(std::string(e.what()).find("8") != std::string::npos);  // names the required multiple
    }
}

TEST_CASE("align_guide identity degeneracies and shift behavior") {
    auto cfg = small_config();
    auto state = ModelState<double>::init(cfg);
    auto fg = diff::leaf(random_tensor({8, 6, 6}, 11), false);

    auto zero_field = diff::leaf(Img({2, 6, 6}), false);
    CHECK(bitwise_equal(align_guide(fg, zero_field, state)->value, fg->value));

    // constant field shifts the feature against the offset direction
    Img ramp({8, 6, 6});
    for (int c = 0; c < 8; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) ramp.at(c, y, x) = x + 0.25 * c;
    Img field({2, 6, 6});
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) field.at(0, y, x) = 2.0;
    auto shifted = align_guide(diff::leaf(ramp), diff::leaf(field), state);
    CHECK(max_abs_diff(shifted->value, oracle::shift_image(ramp, -2, 0)) < 1e-15);

    CHECK_THROWS_AS(align_guide(fg, diff::leaf(Img({18, 6, 6})), state), diff::ContractError);

    // De with identity taps and zero field reproduces the guide
    auto de_state = ModelState<double>::init(small_config(Variant::De));
    auto zero18 = diff::leaf(Img({18, 6, 6}), false);
    CHECK(bitwise_equal(align_guide(fg, zero18, de_state)->value, fg->value));
    CHECK_THROWS_AS(align_guide(fg, zero_field, de_state), diff::ContractError);
}

TEST_CASE("importance_map matches the Sobel oracle and its invariants") {
    // constant feature has zero gradient everywhere
    auto flat = importance_map(Img::full({4, 6, 6}, 3.7));
    CHECK(flat.sum() == 0.0);

    // vertical step edge: strongest response on the two columns next to the edge
    Img step({1, 6, 6});
    for (int y = 0; y < 6; ++y)
        for (int x = 3; x < 6; ++x) step.at(0, y, x) = 1.0;
    auto m = importance_map(step);
    auto expect = oracle::importance(step);
    CHECK(max_abs_diff(m, expect) < 1e-14);
    for (int y = 0; y < 6; ++y) {
        CHECK(m[y * 6 + 2] == doctest::Approx(4.0));
        CHECK(m[y * 6 + 3] == doctest::Approx(4.0));
        CHECK(m[y * 6 + 0] == 0.0);
        CHECK(m[y * 6 + 5] == 0.0);
    }

    auto r = random_tensor({3, 8, 8}, 21);
    auto mr = importance_map(r);
    for (std::int64_t i = 0; i < mr.size(); ++i) CHECK(mr[i] >= 0.0);
    CHECK(max_abs_diff(mr, oracle::importance(r)) < 1e-13);

    // invariant under adding a constant
    Img shifted = r;
    for (std::int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 11.25;
    CHECK(max_abs_diff(importance_map(shifted), mr) < 1e-11);
}

TEST_CASE("importance_threshold arithmetic") {
    CHECK(importance_threshold(Img::full({2, 2}, 1.0), 0.7) == doctest::Approx(0.7));
    CHECK(importance_threshold(Img({2, 2}), 0.9) == 0.0);
    Img m({4}, {0.0, 2.0, 4.0, 6.0});
    CHECK(importance_threshold(m, 0.5) == doctest::Approx(1.5));
    CHECK_THROWS_AS(importance_threshold(m, 0.0), diff::ContractError);
}

TEST_CASE("reference_filter degenerate cases") {
    auto src = random_tensor({2, 5, 5}, 31);
    auto imp = importance_map(src);

    // zero reference: uniform weights, output is the box average
    auto boxed = reference_filter(diff::leaf(src), diff::leaf(Img({2, 5, 5})), imp, std::nullopt, 3, 3);
    auto expect = oracle::reference_filter(src, Img({2, 5, 5}), imp, std::nullopt, 3, 3);
    CHECK(max_abs_diff(boxed->value, expect) < 1e-13);
    // interior pixel is the plain 3x3 mean
    double mean = 0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) mean += src.at(0, 2 + dy, 2 + dx);
    CHECK(boxed->value.at(0, 2, 2) == doctest::Approx(mean / 9.0));

    // constant source stays constant regardless of the reference
    auto constant = reference_filter(diff::leaf(Img::full({2, 5, 5}, 2.5)), diff::leaf(random_tensor({2, 5, 5}, 32)),
                                     Img({5, 5}), std::nullopt, 5, 3);
    for (std::int64_t i = 0; i < constant->value.size(); ++i)
        CHECK(constant->value[i] == doctest::Approx(2.5));

    CHECK_THROWS_AS(
        reference_filter(diff::leaf(src), diff::leaf(src), imp, std::nullopt, 4, 3), diff::ContractError);
    CHECK_THROWS_AS(
        reference_filter(diff::leaf(src), diff::leaf(src), imp, std::nullopt, 3, 5), diff::ContractError);
}

TEST_CASE("reference_filter matches the brute-force oracle") {
    auto src = random_tensor({1, 5, 5}, 41);
    auto ref = random_tensor({1, 5, 5}, 42);
    auto imp = importance_map(src);
    auto out = reference_filter(diff::leaf(src), diff::leaf(ref), imp, std::nullopt, 3, 3);
    CHECK(max_abs_diff(out->value, oracle::reference_filter(src, ref, imp, std::nullopt, 3, 3)) < 1e-12);

    // thresholded mixed kernels on a multi-channel case
    auto src2 = random_tensor({3, 7, 7}, 43);
    auto ref2 = random_tensor({3, 7, 7}, 44);
    auto imp2 = importance_map(src2);
    const double tau = importance_threshold(imp2, 0.7);
    auto out2 = reference_filter(diff::leaf(src2), diff::leaf(ref2), imp2, tau, 5, 3);
    CHECK(max_abs_diff(out2->value, oracle::reference_filter(src2, ref2, imp2, tau, 5, 3)) < 1e-12);
}

TEST_CASE("reference_filter output is a convex combination of the source neighborhood") {
    auto src = random_tensor({2, 6, 6}, 51, -2.0, 2.0);
    auto ref = random_tensor({2, 6, 6}, 52, -2.0, 2.0);
    auto imp = importance_map(src);
    const double tau = importance_threshold(imp, 0.7);
    auto out = reference_filter(diff::leaf(src), diff::leaf(ref), imp, tau, 5, 3);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const int s = imp[y * 6 + x] > tau ? 5 : 3;
                const int r = (s - 1) / 2;
                double lo = 1e300, hi = -1e300;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const double v = src.at(c, oracle::clampi(y + dy, 0, 5), oracle::clampi(x + dx, 0, 5));
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
                CHECK(out->value.at(c, y, x) >= lo - 1e-12);
                CHECK(out->value.at(c, y, x) <= hi + 1e-12);
            }
}

TEST_CASE("filter weights normalize and keep their argmax under positive scaling") {
    auto src = random_tensor({2, 5, 5}, 61);
    auto ref = random_tensor({2, 5, 5}, 62);
    Img scaled = ref;
    for (std::int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= 7.5;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            auto w = oracle::filter_weights_at(src, ref, y, x, 3);
            double sum = 0;
            for (double v : w) {
                CHECK(v > 0.0);
                CHECK(v < 1.0 + 1e-12);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0));
            auto w2 = oracle::filter_weights_at(src, scaled, y, x, 3);
            const auto arg1 = std::max_element(w.begin(), w.end()) - w.begin();
            const auto arg2 = std::max_element(w2.begin(), w2.end()) - w2.begin();
            CHECK(arg1 == arg2);
        }
}

TEST_CASE("reference_filter gradients match finite differences") {
    auto src = diff::leaf(random_tensor({2, 5, 5}, 71, -0.8, 0.8), true);
    auto ref = diff::leaf(random_tensor({2, 5, 5}, 72, -0.8, 0.8), true);
    auto imp = importance_map(src->value);
    std::vector<diff::Parameter<double>> params = {{src, "src"}, {ref, "ref"}};
    auto build = [&] { return diff::sum_all(reference_filter(src, ref, imp, std::nullopt, 3, 3)); };
    auto report = diff::grad_check<double>(build, params, {.step = 1e-6, .tolerance = 1e-3});
    CHECK(report.worst < 1e-3);
}

TEST_CASE("predict maps features to source channels and shares heads") {
    RobSelfConfig cfg;
    cfg.channels_C = 32;
    cfg.phi = 1;
    cfg.seed = 4;
    auto state = ModelState<double>::init(cfg);
    auto feature = diff::leaf(random_tensor({32, 16, 16}, 81), false);
    auto sr = predict(feature, Head::sr, state);
    auto tr = predict(feature, Head::translation, state);
    CHECK(sr->value.shape() == std::vector<int>{1, 16, 16});
    CHECK(bitwise_equal(sr->value, tr->value));  // shared parameter set

    cfg.separate_heads = true;
    auto sep = ModelState<double>::init(cfg);
    auto sr2 = predict(feature, Head::sr, sep);
    auto tr2 = predict(feature, Head::translation, sep);
    CHECK_FALSE(bitwise_equal(sr2->value, tr2->value));
}

TEST_CASE("forward produces guide-resolution predictions for the x2 depth preset") {
    auto cfg = preset("real-depth-x2");
    cfg.seed = 9;
    auto state = ModelState<float>::init(cfg);
    auto src = diff::tensor_cast<float>(random_tensor({1, 288, 320}, 91, 0.0, 1.0));
    auto guide = diff::tensor_cast<float>(random_tensor({3, 576, 640}, 92, 0.0, 1.0));
    auto fwd = forward(src, guide, state);
    CHECK(fwd.sr->value.shape() == std::vector<int>{1, 576, 640});
    REQUIRE(fwd.trans != nullptr);
    CHECK(fwd.trans->value.shape() == std::vector<int>{1, 576, 640});
    CHECK(fwd.diag.large_kernel_fraction >= 0.0);
    CHECK(fwd.diag.large_kernel_fraction <= 1.0);
}

TEST_CASE("forward on a fresh Re state aligns with the raw guide feature") {
    auto cfg = small_config();
    cfg.sr_factor = 2;
    auto state = ModelState<double>::init(cfg);
    auto src = random_tensor({1, 8, 8}, 101, 0.0, 1.0);
    auto guide = random_tensor({3, 16, 16}, 102, 0.0, 1.0);
    auto fwd = forward(src, guide, state);

    auto up = diff::bilinear_resize(src, 16, 16);
    auto [fs, fg] = extract_features(up, guide, state);
    CHECK(bitwise_equal(fwd.diag.f_aligned, fg->value));
    CHECK(fwd.diag.field.sum() == 0.0);

    // with a zero field the full forward equals the pipeline without the
    // alignment layer
    Img imp = importance_map(fs->value);
    std::optional<double> tau;
    if (cfg.eta) tau = importance_threshold(imp, *cfg.eta);
    auto enhanced = reference_filter(fs, fg, imp, tau, cfg.kernel_m, cfg.kernel_n);
    auto sr = predict(enhanced, Head::sr, state);
    CHECK(bitwise_equal(fwd.sr->value, sr->value));
}

TEST_CASE("forward honors the eta=none preset with full large-kernel fraction") {
    auto cfg = preset("real-nir-x2");
    cfg.level_i = 2;  // small inputs in this test
    cfg.seed = 7;
    auto state = ModelState<double>::init(cfg);
    auto fwd = forward(random_tensor({1, 8, 8}, 111, 0.0, 1.0), random_tensor({3, 16, 16}, 112, 0.0, 1.0), state);
    CHECK(fwd.diag.large_kernel_fraction == 1.0);
    CHECK_FALSE(fwd.diag.tau.has_value());
}

TEST_CASE("forward enforces the resolution contracts") {
    auto cfg = small_config();
    auto state = ModelState<double>::init(cfg);
    CHECK_THROWS_AS(forward(random_tensor({1, 8, 8}, 1, 0.0, 1.0), random_tensor({3, 20, 16}, 2, 0.0, 1.0), state),
                    diff::ContractError);
    // 18 not divisible by 2^2 after the ratio check passes
    CHECK_THROWS_AS(forward(random_tensor({1, 9, 8}, 3, 0.0, 1.0), random_tensor({3, 18, 16}, 4, 0.0, 1.0), state),
                    diff::ContractError);
}

TEST_CASE("ablated states expose the expected structure") {
    auto cfg = small_config();
    auto src = random_tensor({1, 8, 8}, 121, 0.0, 1.0);
    auto guide = random_tensor({3, 16, 16}, 122, 0.0, 1.0);

    auto no_t = ModelState<double>::init(cfg, AblationMode::no_translator);
    auto fwd_no_t = forward(src, guide, no_t);
    CHECK(fwd_no_t.trans == nullptr);
    CHECK(fwd_no_t.diag.f_aligned.empty());
    CHECK_FALSE(fwd_no_t.diag.importance.empty());

    auto no_f = ModelState<double>::init(cfg, AblationMode::no_filter);
    auto fwd_no_f = forward(src, guide, no_f);
    CHECK(fwd_no_f.trans != nullptr);
    CHECK(fwd_no_f.diag.importance.empty());
    CHECK(fwd_no_f.diag.large_kernel_fraction == 0.0);
    bool has_fuse = false;
    for (const auto& p : no_f.params) has_fuse |= p.name == "fuse.weight";
    CHECK(has_fuse);

    auto neither = ModelState<double>::init(cfg, AblationMode::no_translator_no_filter);
    auto fwd_neither = forward(src, guide, neither);
    CHECK(fwd_neither.trans == nullptr);
    CHECK(fwd_neither.sr->value.shape() == std::vector<int>{1, 16, 16});
}

TEST_CASE("whole-model gradients match finite differences at a small scale") {
    for (auto v : {Variant::Re, Variant::De}) {
        auto cfg = small_config(v);
        cfg.seed = 31;
        auto state = ModelState<double>::init(cfg);
        perturb_offset_head(state, 77);
        auto src = random_tensor({1, 8, 8}, 131, 0.1, 0.9);
        auto guide = random_tensor({3, 16, 16}, 132, 0.1, 0.9);
        auto build = [&] {
            auto fwd = forward(src, guide, state);
            auto l_sr = diff::l1_mean(diff::avg_pool2d(fwd.sr, 2), src);
            auto l_tr = diff::l1_mean(diff::avg_pool2d(fwd.trans, 2), src);
            return diff::add(l_sr, l_tr);
        };
        auto report = diff::grad_check<double>(build, std::span<const diff::Parameter<double>>(state.params),
                                               {.step = 1e-5, .tolerance = 1e-3, .max_coords_per_param = 4});
        INFO("variant ", variant_name(v), " worst ", report.worst);
        CHECK(report.worst < 1e-3);
    }
}
