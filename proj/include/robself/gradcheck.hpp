#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "robself/graph.hpp"

namespace robself::diff {

struct GradCheckOptions {
    double step = 1e-5;             // central difference half-width
    double tolerance = 1e-3;
    int max_coords_per_param = 0;   // 0 = check every coordinate
    std::uint64_t sample_seed = 17;
    bool exclude_ties = true;       // skip non-differentiable points (kinks, exact ties)
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    int coords_checked = 0;
    int ties_skipped = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;

    bool all_below(double tol) const {
        for (const auto& e : entries)
            if (!(e.max_rel_error < tol)) return false;
        return true;
    }
};

// Relative disagreement between analytic and numeric derivatives; absolute
// when both are tiny.
inline double grad_discrepancy(double analytic, double numeric) {
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    const double diff = std::abs(analytic - numeric);
    return denom < 1e-6 ? diff : diff / denom;
}

// Seeded uniform tensor for probe inputs.
template <std::floating_point T>
Tensor<T> random_uniform(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    std::mt19937_64 rng(seed);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        t[i] = static_cast<T>(lo + (hi - lo) * u);
    }
    return t;
}

// Compares every parameter's analytic gradient against central finite
// differences of the rebuilt loss. Never throws on disagreement; the report
// carries the max relative error per parameter. Meaningful in double
// precision only.
template <std::floating_point T>
GradCheckReport grad_check(const std::function<NodePtr<T>()>& build_loss, std::span<const Parameter<T>> params,
                           const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    auto analytic = backward(build_loss(), params);
    const T h = static_cast<T>(opt.step);

    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Parameter<T>& p = params[pi];
        const std::int64_t n = p.node->value.size();
        std::vector<std::int64_t> coords;
        if (opt.max_coords_per_param <= 0 || n <= opt.max_coords_per_param) {
            coords.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::mt19937_64 rng(opt.sample_seed + 0x9e3779b97f4a7c15ull * (pi + 1));
            std::vector<std::int64_t> all(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            for (int i = 0; i < opt.max_coords_per_param; ++i) {
                const size_t j = i + static_cast<size_t>(rng() % (all.size() - i));
                std::swap(all[i], all[j]);
            }
            coords.assign(all.begin(), all.begin() + opt.max_coords_per_param);
        }

        GradCheckEntry entry{p.name, 0.0, static_cast<int>(coords.size()), 0};
        const Tensor<T>& ga = analytic.at(p.name);
        Tensor<T>& v = p.node->value;
        auto central = [&](std::int64_t c, T hh) {
            const T orig = v[c];
            v[c] = orig + hh;
            const double f_plus = static_cast<double>(build_loss()->value[0]);
            v[c] = orig - hh;
            const double f_minus = static_cast<double>(build_loss()->value[0]);
            v[c] = orig;
            return (f_plus - f_minus) / (2.0 * static_cast<double>(hh));
        };
        for (std::int64_t c : coords) {
            const double an = static_cast<double>(ga[c]);
            double err = grad_discrepancy(an, central(c, h));
            if (err >= opt.tolerance && opt.exclude_ties) {
                // Piecewise-linear activations make the loss polygonal at the
                // stencil scale; refine the step while the estimate converges
                // toward the analytic value. A wrong gradient stays wrong at
                // every rung because the estimates converge elsewhere.
                T hh = h;
                for (int rung = 0; rung < 5 && err >= opt.tolerance; ++rung) {
                    hh /= T(4);
                    err = std::min(err, grad_discrepancy(an, central(c, hh)));
                }
                if (err >= opt.tolerance) {
                    // sided-slope probe: a genuine kink at the point itself
                    const T orig = v[c];
                    const double f0 = static_cast<double>(build_loss()->value[0]);
                    v[c] = orig + hh;
                    const double fp = static_cast<double>(build_loss()->value[0]);
                    v[c] = orig - hh;
                    const double fm = static_cast<double>(build_loss()->value[0]);
                    v[c] = orig;
                    const double d_fwd = (fp - f0) / static_cast<double>(hh);
                    const double d_bwd = (f0 - fm) / static_cast<double>(hh);
                    if (std::abs(d_fwd - d_bwd) > 0.25 * std::max({std::abs(d_fwd), std::abs(d_bwd), 1e-8})) {
                        ++entry.ties_skipped;
                        continue;
                    }
                }
            }
            entry.max_rel_error = std::max(entry.max_rel_error, err);
        }
        report.worst = std::max(report.worst, entry.max_rel_error);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace robself::diff
