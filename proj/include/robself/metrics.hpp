#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "robself/tensor.hpp"

namespace robself::metrics {

using Image = diff::Tensor<double>;

// scale · sqrt(mean((pred − gt)²)); scale converts stored units to physical
// units. All pixels count, no boundary cropping.
double rmse(const Image& pred, const Image& gt, double scale = 1.0);

// 10·log10(1/mse) on [0,1]-normalized data; +infinity for exact equality.
double psnr(const Image& pred, const Image& gt);

struct EvalRow {
    std::string pair;
    double rmse = 0.0;
    double psnr = 0.0;
    std::int64_t pixels = 0;
    bool has_gt = false;
};

struct EvalReport {
    std::vector<EvalRow> rows;

    // Mean of per-pair metrics over rows with ground truth; pixel counts sum.
    EvalRow aggregate() const;
    void write_csv(std::ostream& out) const;  // pair,rmse,psnr,pixels
};

}  // namespace robself::metrics
