#include "robself/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace robself::metrics {

double rmse(const Image& pred, const Image& gt, double scale) {
    diff::ensure_same_shape(pred, gt, "rmse");
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - gt[i];
        acc += d * d;
    }
    return scale * std::sqrt(acc / static_cast<double>(pred.size()));
}

double psnr(const Image& pred, const Image& gt) {
    diff::ensure_same_shape(pred, gt, "psnr");
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - gt[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(pred.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

EvalRow EvalReport::aggregate() const {
    EvalRow agg;
    agg.pair = "aggregate";
    std::int64_t with_gt = 0;
    for (const auto& r : rows) {
        agg.pixels += r.pixels;
        if (!r.has_gt) continue;
        ++with_gt;
        agg.rmse += r.rmse;
        agg.psnr += r.psnr;
    }
    if (with_gt > 0) {
        agg.rmse /= static_cast<double>(with_gt);
        agg.psnr /= static_cast<double>(with_gt);
        agg.has_gt = true;
    }
    return agg;
}

namespace {

void write_row(std::ostream& out, const EvalRow& r) {
    char buf[96];
    if (r.has_gt) {
        if (std::isinf(r.psnr))
            std::snprintf(buf, sizeof buf, ",%.9g,inf,%lld\n", r.rmse, static_cast<long long>(r.pixels));
        else
            std::snprintf(buf, sizeof buf, ",%.9g,%.9g,%lld\n", r.rmse, r.psnr, static_cast<long long>(r.pixels));
    } else {
        std::snprintf(buf, sizeof buf, ",,,%lld\n", static_cast<long long>(r.pixels));
    }
    out << r.pair << buf;
}

}  // namespace

void EvalReport::write_csv(std::ostream& out) const {
    out << "pair,rmse,psnr,pixels\n";
    for (const auto& r : rows) write_row(out, r);
    write_row(out, aggregate());
}

}  // namespace robself::metrics
