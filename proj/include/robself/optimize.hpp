#pragma once

#include <chrono>
#include <cmath>
#include <iosfwd>
#include <string>
#include <vector>

#include "robself/data.hpp"
#include "robself/model.hpp"

namespace robself::opt {

using diff::NodePtr;
using diff::Parameter;
using diff::Tensor;
using model::AblationMode;
using model::ModelState;
using model::RobSelfConfig;

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Step-decay schedule: lr_init · decay^floor(iter/every).
inline double lr_at(int iter, double lr_init, double decay, int every) {
    if (iter < 0) throw diff::ContractError("lr_at: iteration must be >= 0");
    return lr_init * std::pow(decay, static_cast<double>(iter / every));
}

template <std::floating_point T>
struct LossParts {
    NodePtr<T> total;
    NodePtr<T> sr;
    NodePtr<T> trans;  // null when the translation branch is absent
};

// L = |pool(I_SR) − I_LR|₁ + λ·|pool(I_Trans) − I_LR|₁, means over pixels.
template <std::floating_point T>
LossParts<T> consistency_loss(const NodePtr<T>& i_sr, const NodePtr<T>& i_trans, const Tensor<T>& i_lr,
                              int sr_factor, T lambda) {
    if (i_sr->value.dim(1) != i_lr.dim(1) * sr_factor || i_sr->value.dim(2) != i_lr.dim(2) * sr_factor)
        throw diff::ContractError("consistency_loss: prediction extents must be sr_factor x LR extents");
    LossParts<T> parts;
    parts.sr = diff::l1_mean(diff::avg_pool2d(i_sr, sr_factor), i_lr);
    if (i_trans) {
        parts.trans = diff::l1_mean(diff::avg_pool2d(i_trans, sr_factor), i_lr);
        parts.total = diff::add(parts.sr, diff::scale(parts.trans, lambda));
    } else {
        parts.total = parts.sr;
    }
    return parts;
}

// Bias-corrected Adam, β1=0.9 β2=0.999 ε=1e-8. Moments are kept in the
// parameter enumeration order.
template <std::floating_point T>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<Tensor<T>> m, v;
    long step = 0;

    static AdamState init(std::span<const Parameter<T>> params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& p : params) {
            s.m.emplace_back(p.node->value.shape());
            s.v.emplace_back(p.node->value.shape());
        }
        return s;
    }
};

template <std::floating_point T>
void adam_step(AdamState<T>& state, std::span<const Parameter<T>> params, double lr) {
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Parameter<T>& p = params[pi];
        Tensor<T>& value = p.node->value;
        const bool has_grad = !p.node->grad.empty() && p.node->grad.same_shape(value);
        Tensor<T>& m = state.m[pi];
        Tensor<T>& v = state.v[pi];
        for (std::int64_t i = 0; i < value.size(); ++i) {
            const double g = has_grad ? static_cast<double>(p.node->grad[i]) : 0.0;
            if (!std::isfinite(g))
                throw DivergenceError("adam_step: non-finite gradient in parameter '" + p.name + "'");
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = lr * (mi / corr1) / (std::sqrt(vi / corr2) + state.eps);
            value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
        }
    }
}

struct TraceRow {
    int iter = 0;
    double lr = 0, loss_sr = 0, loss_trans = 0, loss_total = 0, ms = 0;
};

// Per-iteration record of one online optimization run.
struct OptimTrace {
    std::vector<TraceRow> rows;
    double final_large_kernel_fraction = 0.0;

    void write_csv(std::ostream& out) const;
};

template <std::floating_point T>
struct PairRunResult {
    Tensor<T> sr;
    Tensor<T> trans;  // empty when the translation branch is absent
    model::Diagnostics<T> diag;
    OptimTrace trace;
    std::int64_t parameter_count = 0;
    bool diverged = false;
    std::string message;
};

// Online self-supervised optimization of one source/guide pair: `iterations`
// forward/backward/update cycles followed by a final forward for the
// returned predictions. Deterministic given the config seed. Divergence
// aborts the loop and keeps the partial trace.
template <std::floating_point T>
PairRunResult<T> optimize_pair(const Tensor<T>& source_lr, const Tensor<T>& guide, const RobSelfConfig& cfg,
                               AblationMode ablation = AblationMode::none) {
    using clock = std::chrono::steady_clock;
    ModelState<T> state = ModelState<T>::init(cfg, ablation);
    auto adam = AdamState<T>::init(std::span<const Parameter<T>>(state.params));

    PairRunResult<T> result;
    result.parameter_count = state.parameter_count();
    result.trace.rows.reserve(static_cast<size_t>(cfg.iterations));
    const T lambda = static_cast<T>(cfg.lambda);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto t0 = clock::now();
        try {
            auto fwd = model::forward(source_lr, guide, state);
            auto loss = consistency_loss(fwd.sr, fwd.trans, source_lr, cfg.sr_factor, lambda);
            const double lr = lr_at(iter, cfg.lr_init, cfg.lr_decay, cfg.lr_decay_every);
            diff::zero_grads(std::span<const Parameter<T>>(state.params));
            diff::backward(loss.total);
            adam_step(adam, std::span<const Parameter<T>>(state.params), lr);
            const double ms =
                std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(clock::now() - t0).count();
            result.trace.rows.push_back({iter, lr, static_cast<double>(loss.sr->value[0]),
                                         loss.trans ? static_cast<double>(loss.trans->value[0]) : 0.0,
                                         static_cast<double>(loss.total->value[0]), ms});
        } catch (const diff::NumericError& e) {
            result.diverged = true;
            result.message = e.what();
            return result;
        } catch (const DivergenceError& e) {
            result.diverged = true;
            result.message = e.what();
            return result;
        }
    }

    try {
        auto fwd = model::forward(source_lr, guide, state);
        result.sr = fwd.sr->value;
        if (fwd.trans) result.trans = fwd.trans->value;
        result.diag = std::move(fwd.diag);
        result.trace.final_large_kernel_fraction = result.diag.large_kernel_fraction;
    } catch (const diff::NumericError& e) {
        result.diverged = true;
        result.message = e.what();
    }
    return result;
}

// Spec surface taking an on-disk pair; the templated core above is the
// precision-dispatched implementation.
template <std::floating_point T>
PairRunResult<T> optimize_pair(const data::ImagePair& pair, const RobSelfConfig& cfg,
                               AblationMode ablation = AblationMode::none) {
    return optimize_pair(diff::tensor_cast<T>(pair.source_lr), diff::tensor_cast<T>(pair.guide_hr), cfg, ablation);
}

}  // namespace robself::opt
