// Per-operator and whole-model finite-difference verification, backing the
// `robself gradcheck` subcommand.

#include <cstdio>
#include <functional>
#include <iostream>
#include <vector>

#include "robself/gradcheck.hpp"
#include "robself/model.hpp"
#include "robself/optimize.hpp"

using namespace robself;
using diff::GradCheckOptions;
using diff::GradCheckReport;
using diff::leaf;
using diff::Parameter;
using diff::random_uniform;
using model::RobSelfConfig;
using model::Variant;
using Img = diff::Tensor<double>;

namespace {

struct SuiteEntry {
    std::string op;
    GradCheckReport report;
};

GradCheckReport check_conv2d(const GradCheckOptions& opt) {
    auto in = leaf(random_uniform<double>({2, 6, 6}, 1001), true);
    auto w1 = leaf(random_uniform<double>({3, 2, 3, 3}, 1002, -0.5, 0.5), true);
    auto b1 = leaf(random_uniform<double>({3}, 1003, -0.1, 0.1), true);
    auto w2 = leaf(random_uniform<double>({2, 3, 3, 3}, 1004, -0.5, 0.5), true);
    auto b2 = leaf(random_uniform<double>({2}, 1005, -0.1, 0.1), true);
    std::vector<Parameter<double>> params = {{in, "input"}, {w1, "weight1"}, {b1, "bias1"}, {w2, "weight2"},
                                             {b2, "bias2"}};
    auto build = [&] {
        return diff::sum_all(diff::conv2d(diff::leaky_relu(diff::conv2d(in, w1, b1, 1, 1), 0.1), w2, b2, 2, 1));
    };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_avg_pool(const GradCheckOptions& opt) {
    auto in = leaf(random_uniform<double>({2, 8, 8}, 1011), true);
    std::vector<Parameter<double>> params = {{in, "input"}};
    auto build = [&] { return diff::sum_all(diff::avg_pool2d(in, 2)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_bilinear_resize(const GradCheckOptions& opt) {
    auto in = leaf(random_uniform<double>({2, 5, 7}, 1021), true);
    std::vector<Parameter<double>> params = {{in, "input"}};
    auto build = [&] { return diff::sum_all(diff::bilinear_resize(in, 11, 9)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_grid_sample(const GradCheckOptions& opt) {
    Img smooth({2, 6, 6});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x)
                smooth.at(c, y, x) = std::sin(0.8 * x + 0.2 * c) + 0.5 * std::cos(0.7 * y);
    auto in = leaf(smooth, true);
    auto off = leaf(random_uniform<double>({2, 6, 6}, 1031, -0.45, 0.45), true);
    std::vector<Parameter<double>> params = {{in, "input"}, {off, "offsets"}};
    auto build = [&] { return diff::sum_all(diff::grid_sample(in, off)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_deform_conv2d(const GradCheckOptions& opt) {
    Img smooth({1, 6, 6});
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) smooth.at(0, y, x) = std::sin(0.9 * x + 0.3) + 0.6 * std::cos(0.8 * y);
    auto in = leaf(smooth, true);
    auto w = leaf(random_uniform<double>({1, 1, 3, 3}, 1041, -0.5, 0.5), true);
    auto off = leaf(random_uniform<double>({18, 6, 6}, 1042, -0.45, 0.45), true);
    std::vector<Parameter<double>> params = {{in, "input"}, {w, "weight"}, {off, "offsets"}};
    auto build = [&] { return diff::sum_all(diff::deform_conv2d(in, w, off)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_leaky_relu(const GradCheckOptions& opt) {
    auto v = random_uniform<double>({3, 4, 4}, 1051, 0.05, 1.0);
    for (std::int64_t i = 0; i < v.size(); ++i)
        if (i % 2) v[i] = -v[i];  // both sides, away from the kink
    auto in = leaf(v, true);
    std::vector<Parameter<double>> params = {{in, "input"}};
    auto build = [&] { return diff::sum_all(diff::leaky_relu(in, 0.1)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_concat(const GradCheckOptions& opt) {
    auto a = leaf(random_uniform<double>({1, 4, 4}, 1061), true);
    auto b = leaf(random_uniform<double>({2, 4, 4}, 1062), true);
    std::vector<Parameter<double>> params = {{a, "a"}, {b, "b"}};
    auto build = [&] { return diff::sum_all(diff::concat_channels(a, b)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_l1_mean(const GradCheckOptions& opt) {
    auto a = leaf(random_uniform<double>({2, 4, 4}, 1071), true);
    auto target = random_uniform<double>({2, 4, 4}, 1072);
    std::vector<Parameter<double>> params = {{a, "a"}};
    auto build = [&] { return diff::l1_mean(a, target); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_reference_filter(const GradCheckOptions& opt) {
    auto src = leaf(random_uniform<double>({2, 5, 5}, 1081, -0.8, 0.8), true);
    auto ref = leaf(random_uniform<double>({2, 5, 5}, 1082, -0.8, 0.8), true);
    auto imp = model::importance_map(src->value);
    std::vector<Parameter<double>> params = {{src, "source"}, {ref, "reference"}};
    auto build = [&] { return diff::sum_all(model::reference_filter(src, ref, imp, std::nullopt, 3, 3)); };
    return diff::grad_check<double>(build, params, opt);
}

GradCheckReport check_model_preset(const std::string& name, Variant variant, const GradCheckOptions& base) {
    RobSelfConfig cfg = model::preset(name);
    cfg.variant = variant;
    cfg.level_i = std::min(cfg.level_i, 4);  // 16x16 check scale
    cfg.channels_C = 8;
    cfg.seed = 97;
    auto state = model::ModelState<double>::init(cfg);
    model::perturb_offset_head(state, 131);
    auto src = random_uniform<double>({cfg.phi, 16 / cfg.sr_factor, 16 / cfg.sr_factor}, 2001, 0.1, 0.9);
    auto guide = random_uniform<double>({cfg.psi, 16, 16}, 2002, 0.1, 0.9);
    GradCheckOptions opt = base;
    opt.max_coords_per_param = 4;
    auto build = [&, src, guide] {
        auto fwd = model::forward(src, guide, state);
        return opt::consistency_loss(fwd.sr, fwd.trans, src, cfg.sr_factor, cfg.lambda).total;
    };
    return diff::grad_check<double>(build, std::span<const diff::Parameter<double>>(state.params), opt);
}

}  // namespace

int cmd_gradcheck(double tolerance, const std::string& only_op) {
    GradCheckOptions opt;
    opt.tolerance = tolerance;
    std::vector<std::pair<std::string, std::function<GradCheckReport()>>> checks = {
        {"conv2d", [&] { return check_conv2d(opt); }},
        {"avg_pool2d", [&] { return check_avg_pool(opt); }},
        {"bilinear_resize", [&] { return check_bilinear_resize(opt); }},
        {"grid_sample", [&] { return check_grid_sample(opt); }},
        {"deform_conv2d", [&] { return check_deform_conv2d(opt); }},
        {"leaky_relu", [&] { return check_leaky_relu(opt); }},
        {"concat_channels", [&] { return check_concat(opt); }},
        {"l1_mean", [&] { return check_l1_mean(opt); }},
        {"reference_filter", [&] { return check_reference_filter(opt); }},
    };

    bool all_ok = true;
    auto print_report = [&](const std::string& where, const GradCheckReport& report) {
        for (const auto& e : report.entries) {
            const bool ok = e.max_rel_error < tolerance;
            all_ok &= ok;
            std::printf("%-10s %-28s %-38s %10.3e  %s\n", ok ? "ok" : "FAIL", where.c_str(), e.name.c_str(),
                        e.max_rel_error, e.ties_skipped ? "(ties skipped)" : "");
        }
    };

    for (const auto& [name, fn] : checks) {
        if (!only_op.empty() && only_op != name) continue;
        print_report(name, fn());
    }
    if (only_op.empty() || only_op == "model") {
        for (const auto& preset_name : model::preset_names())
            for (auto variant : {Variant::Re, Variant::De}) {
                const std::string where = preset_name + "/" + model::variant_name(variant);
                print_report(where, check_model_preset(preset_name, variant, opt));
            }
    }
    std::printf("%s\n", all_ok ? "gradcheck: all parameters within tolerance" : "gradcheck: FAILURES present");
    return all_ok ? 0 : 1;
}
