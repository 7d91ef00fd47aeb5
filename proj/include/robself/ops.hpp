#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>

#include "robself/graph.hpp"
#include "robself/runtime.hpp"
#include "robself/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace robself::diff {

namespace detail {

template <std::floating_point T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <std::floating_point T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <std::floating_point T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

// C (m×n) = op(A) · op(B) on row-major buffers, where op transposes when the
// flag is set: A is stored (ta ? k×m : m×k), B is stored (tb ? n×k : k×n).
// Each output element is produced by exactly one thread with a fixed
// reduction order over k, so results do not depend on the thread count.
template <std::floating_point T>
void gemm(bool ta, bool tb, int m, int k, int n, const T* A, const T* B, T* C, bool accumulate = false) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
    int threads = robself::max_threads();
#ifndef _OPENMP
    threads = 1;
#endif
    if (threads > 1 && work < (1 << 20)) threads = 1;

    using StridedConst = Eigen::Map<const EigenMat<T>, 0, Eigen::OuterStride<>>;
    using StridedMut = Eigen::Map<EigenMat<T>, 0, Eigen::OuterStride<>>;

    auto run_block = [&](int r0, int rows, int c0, int cols) {
        // rows r0..r0+rows of op(A): plain rows when not transposed, column
        // slice of the stored k×m matrix otherwise.
        StridedConst a(ta ? A + r0 : A + static_cast<std::int64_t>(r0) * k, ta ? k : rows, ta ? rows : k,
                       Eigen::OuterStride<>(ta ? m : k));
        StridedConst b(tb ? B + static_cast<std::int64_t>(c0) * k : B + c0, tb ? cols : k, tb ? k : cols,
                       Eigen::OuterStride<>(tb ? k : n));
        StridedMut c(C + static_cast<std::int64_t>(r0) * n + c0, rows, cols, Eigen::OuterStride<>(n));
        if (ta && tb) {
            if (accumulate)
                c.noalias() += a.transpose() * b.transpose();
            else
                c.noalias() = a.transpose() * b.transpose();
        } else if (ta) {
            if (accumulate)
                c.noalias() += a.transpose() * b;
            else
                c.noalias() = a.transpose() * b;
        } else if (tb) {
            if (accumulate)
                c.noalias() += a * b.transpose();
            else
                c.noalias() = a * b.transpose();
        } else {
            if (accumulate)
                c.noalias() += a * b;
            else
                c.noalias() = a * b;
        }
    };

    if (threads <= 1) {
        run_block(0, m, 0, n);
        return;
    }
#ifdef _OPENMP
    if (m >= 2 * threads) {
#pragma omp parallel num_threads(threads)
        {
            int t = omp_get_thread_num();
            int per = (m + threads - 1) / threads;
            int r0 = t * per;
            int rows = std::min(per, m - r0);
            if (rows > 0) run_block(r0, rows, 0, n);
        }
    } else {
#pragma omp parallel num_threads(threads)
        {
            int t = omp_get_thread_num();
            int per = (n + threads - 1) / threads;
            int c0 = t * per;
            int cols = std::min(per, n - c0);
            if (cols > 0) run_block(0, m, c0, cols);
        }
    }
#endif
}

template <std::floating_point T>
void matmul(int m, int k, int n, const T* A, const T* B, T* C, bool accumulate = false) {
    gemm(false, false, m, k, n, A, B, C, accumulate);
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Reusable uninitialized-content scratch, one pair per thread; graphs are
// single-threaded, so sequential reuse inside one backward pass is safe.
template <std::floating_point T>
std::vector<T>& scratch_a(size_t n) {
    static thread_local std::vector<T> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}
template <std::floating_point T>
std::vector<T>& scratch_b(size_t n) {
    static thread_local std::vector<T> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

// Output-column range [lo, hi] whose taps land strictly inside the image.
inline std::pair<int, int> interior_span(int extent, int out, int stride, int offs) {
    // positions p = ox*stride + offs must satisfy 0 <= p <= extent-1
    int lo = offs >= 0 ? 0 : (-offs + stride - 1) / stride;
    int hi = (extent - 1 - offs) / stride;
    if (extent - 1 - offs < 0) hi = -1;
    return {std::min(lo, out), std::min(hi, out - 1)};
}

// Patch matrix for convolution: rows (ci*k*k + ky*k + kx), columns (oy*W'+ox).
// Out-of-range reads replicate the border.
template <std::floating_point T>
void im2col(const Tensor<T>& in, int k, int stride, int pad, int oh, int ow, T* col) {
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
#ifdef _OPENMP
#pragma omp parallel for num_threads(robself::max_threads()) schedule(static)
#endif
    for (int ci = 0; ci < C; ++ci) {
        const T* src = in.data() + static_cast<std::int64_t>(ci) * H * W;
        T* dst = col + static_cast<std::int64_t>(ci) * k * k * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = dst + static_cast<std::int64_t>(ky * k + kx) * plane;
                const auto [lo, hi] = interior_span(W, ow, stride, kx - pad);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = clampi(oy * stride + ky - pad, 0, H - 1);
                    const T* srow = src + static_cast<std::int64_t>(iy) * W;
                    T* drow = row + static_cast<std::int64_t>(oy) * ow;
                    for (int ox = 0; ox < lo; ++ox) drow[ox] = srow[0];
                    if (stride == 1) {
                        if (hi >= lo) std::copy(srow + lo + kx - pad, srow + hi + 1 + kx - pad, drow + lo);
                    } else {
                        for (int ox = lo; ox <= hi; ++ox) drow[ox] = srow[ox * stride + kx - pad];
                    }
                    for (int ox = hi + 1; ox < ow; ++ox)
                        drow[ox] = srow[clampi(ox * stride + kx - pad, 0, W - 1)];
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch gradients back to the input layout.
template <std::floating_point T>
void col2im_add(const T* col, int k, int stride, int pad, int oh, int ow, Tensor<T>& gin) {
    const int C = gin.dim(0), H = gin.dim(1), W = gin.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
#ifdef _OPENMP
#pragma omp parallel for num_threads(robself::max_threads()) schedule(static)
#endif
    for (int ci = 0; ci < C; ++ci) {
        T* dst = gin.data() + static_cast<std::int64_t>(ci) * H * W;
        const T* src = col + static_cast<std::int64_t>(ci) * k * k * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = src + static_cast<std::int64_t>(ky * k + kx) * plane;
                const auto [lo, hi] = interior_span(W, ow, stride, kx - pad);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = clampi(oy * stride + ky - pad, 0, H - 1);
                    T* drow = dst + static_cast<std::int64_t>(iy) * W;
                    const T* srow = row + static_cast<std::int64_t>(oy) * ow;
                    for (int ox = 0; ox < lo; ++ox) drow[0] += srow[ox];
                    if (stride == 1) {
                        T* d = drow + lo + kx - pad;
                        for (int ox = lo; ox <= hi; ++ox) d[ox - lo] += srow[ox];
                    } else {
                        for (int ox = lo; ox <= hi; ++ox) drow[ox * stride + kx - pad] += srow[ox];
                    }
                    for (int ox = hi + 1; ox < ow; ++ox)
                        drow[clampi(ox * stride + kx - pad, 0, W - 1)] += srow[ox];
                }
            }
        }
    }
}

// One bilinear sampling site with clamp-to-edge and the saturation flags that
// gate offset gradients.
template <std::floating_point T>
struct BilinearTap {
    int x0, x1, y0, y1;
    T fx, fy;
    bool dx_live, dy_live;
};

template <std::floating_point T>
BilinearTap<T> make_tap(T sx, T sy, int W, int H) {
    BilinearTap<T> t;
    t.dx_live = sx > T(0) && sx < T(W - 1);
    t.dy_live = sy > T(0) && sy < T(H - 1);
    sx = std::clamp(sx, T(0), T(W - 1));
    sy = std::clamp(sy, T(0), T(H - 1));
    if (W == 1) {
        t.x0 = t.x1 = 0;
        t.fx = 0;
    } else {
        t.x0 = clampi(static_cast<int>(std::floor(sx)), 0, W - 2);
        t.x1 = t.x0 + 1;
        t.fx = sx - static_cast<T>(t.x0);
    }
    if (H == 1) {
        t.y0 = t.y1 = 0;
        t.fy = 0;
    } else {
        t.y0 = clampi(static_cast<int>(std::floor(sy)), 0, H - 2);
        t.y1 = t.y0 + 1;
        t.fy = sy - static_cast<T>(t.y0);
    }
    return t;
}

template <std::floating_point T>
T sample_tap(const T* plane, int W, const BilinearTap<T>& t) {
    const T v00 = plane[static_cast<std::int64_t>(t.y0) * W + t.x0];
    const T v01 = plane[static_cast<std::int64_t>(t.y0) * W + t.x1];
    const T v10 = plane[static_cast<std::int64_t>(t.y1) * W + t.x0];
    const T v11 = plane[static_cast<std::int64_t>(t.y1) * W + t.x1];
    return (T(1) - t.fy) * ((T(1) - t.fx) * v00 + t.fx * v01) + t.fy * ((T(1) - t.fx) * v10 + t.fx * v11);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <std::floating_point T>
NodePtr<T> conv2d(const NodePtr<T>& input, const NodePtr<T>& weight, const NodePtr<T>& bias, int stride,
                  int padding) {
    const Tensor<T>& in = input->value;
    const Tensor<T>& w = weight->value;
    if (in.rank() != 3 || w.rank() != 4)
        throw DimensionError("conv2d: expected input {C,H,W} and weight {O,I,k,k}");
    const int cin = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                             std::to_string(w.dim(1)));
    if (w.dim(3) != k || k % 2 == 0) throw ContractError("conv2d: kernel must be square with odd size");
    if (bias->value.size() != cout) throw DimensionError("conv2d: bias length must equal output channels");
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const int oh = (H + 2 * padding - k) / stride + 1;
    const int ow = (W + 2 * padding - k) / stride + 1;
    if (oh < 1 || ow < 1) throw DimensionError("conv2d: input smaller than kernel");

    const int K = cin * k * k;
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
    auto& col = detail::scratch_a<T>(static_cast<size_t>(K) * plane);
    detail::im2col(in, k, stride, padding, oh, ow, col.data());

    Tensor<T> out({cout, oh, ow});
    detail::matmul(cout, K, static_cast<int>(plane), w.data(), col.data(), out.data());
    for (int co = 0; co < cout; ++co) {
        const T b = bias->value[co];
        T* row = out.data() + co * plane;
        for (std::int64_t p = 0; p < plane; ++p) row[p] += b;
    }

    auto backprop = [k, stride, padding, oh, ow, K, plane](Node<T>& self) {
        auto& inp = self.parents[0];
        auto& wp = self.parents[1];
        auto& bp = self.parents[2];
        const int cout = self.value.dim(0);
        const T* gout = self.grad.data();
        if (bp->requires_grad) {
            auto& gb = bp->ensure_grad();
            for (int co = 0; co < cout; ++co) {
                T s = 0;
                const T* row = gout + co * plane;
                for (std::int64_t p = 0; p < plane; ++p) s += row[p];
                gb[co] += s;
            }
        }
        if (wp->requires_grad) {
            auto& col = detail::scratch_a<T>(static_cast<size_t>(K) * plane);
            detail::im2col(inp->value, k, stride, padding, oh, ow, col.data());
            // gW (cout×K) += gout (cout×plane) · colᵀ
            detail::gemm(false, true, cout, static_cast<int>(plane), K, gout, col.data(),
                         wp->ensure_grad().data(), true);
        }
        if (inp->requires_grad) {
            // gcol (K×plane) = wᵀ (K×cout) · gout
            auto& gcol = detail::scratch_b<T>(static_cast<size_t>(K) * plane);
            detail::gemm(true, false, K, cout, static_cast<int>(plane), wp->value.data(), gout, gcol.data());
            detail::col2im_add(gcol.data(), k, stride, padding, oh, ow, inp->ensure_grad());
        }
    };
    return make_node<T>(std::move(out), {input, weight, bias}, std::move(backprop), "conv2d");
}

// ---------------------------------------------------------------------------
// avg_pool2d

template <std::floating_point T>
Tensor<T> avg_pool_tensor(const Tensor<T>& in, int factor) {
    if (in.rank() != 3) throw DimensionError("avg_pool2d: expected {C,H,W}");
    if (factor < 1) throw ContractError("avg_pool2d: factor must be >= 1");
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    if (H % factor != 0 || W % factor != 0)
        throw DimensionError("avg_pool2d: extents " + in.shape_string() + " not divisible by factor " +
                             std::to_string(factor));
    const int oh = H / factor, ow = W / factor;
    Tensor<T> out({C, oh, ow});
    const T inv = T(1) / static_cast<T>(factor * factor);
    // pairwise block reduction: for power-of-two factors, pooling a
    // block-constant image reproduces the constants bitwise
    std::vector<T> buf(static_cast<size_t>(factor) * factor);
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        buf[static_cast<size_t>(dy) * factor + dx] = in.at(c, oy * factor + dy, ox * factor + dx);
                int n = factor * factor;
                while (n > 1) {
                    const int half = n / 2;
                    for (int i = 0; i < half; ++i) buf[static_cast<size_t>(i)] = buf[2 * static_cast<size_t>(i)] + buf[2 * static_cast<size_t>(i) + 1];
                    if (n % 2) buf[static_cast<size_t>(half)] = buf[static_cast<size_t>(n) - 1];
                    n = half + (n % 2);
                }
                out.at(c, oy, ox) = buf[0] * inv;
            }
    return out;
}

template <std::floating_point T>
NodePtr<T> avg_pool2d(const NodePtr<T>& input, int factor) {
    Tensor<T> out = avg_pool_tensor(input->value, factor);
    auto backprop = [factor](Node<T>& self) {
        auto& inp = self.parents[0];
        if (!inp->requires_grad) return;
        Tensor<T>& gin = inp->ensure_grad();
        const int C = self.value.dim(0), oh = self.value.dim(1), ow = self.value.dim(2);
        const T inv = T(1) / static_cast<T>(factor * factor);
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const T g = self.grad.at(c, oy, ox) * inv;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx) gin.at(c, oy * factor + dy, ox * factor + dx) += g;
                }
    };
    return make_node<T>(std::move(out), {input}, std::move(backprop), "avg_pool2d");
}

// Nearest-neighbor block broadcast, the right inverse of avg_pool_tensor.
template <std::floating_point T>
Tensor<T> nearest_upsample(const Tensor<T>& in, int factor) {
    if (in.rank() != 3) throw DimensionError("nearest_upsample: expected {C,H,W}");
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    Tensor<T> out({C, H * factor, W * factor});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * factor; ++y)
            for (int x = 0; x < W * factor; ++x) out.at(c, y, x) = in.at(c, y / factor, x / factor);
    return out;
}

// ---------------------------------------------------------------------------
// bilinear_resize — half-pixel-center convention:
// x_src = (x_dst + 0.5)·(w/out_w) − 0.5, clamped to [0, w−1].

template <std::floating_point T>
Tensor<T> bilinear_resize(const Tensor<T>& in, int out_h, int out_w) {
    if (in.rank() != 3) throw DimensionError("bilinear_resize: expected {C,H,W}");
    if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize: output extents must be positive");
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const T sy = static_cast<T>(H) / static_cast<T>(out_h);
    const T sx = static_cast<T>(W) / static_cast<T>(out_w);
    Tensor<T> out({C, out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        const T ys = (static_cast<T>(y) + T(0.5)) * sy - T(0.5);
        for (int x = 0; x < out_w; ++x) {
            const T xs = (static_cast<T>(x) + T(0.5)) * sx - T(0.5);
            auto tap = detail::make_tap(xs, ys, W, H);
            for (int c = 0; c < C; ++c)
                out.at(c, y, x) = detail::sample_tap(in.data() + static_cast<std::int64_t>(c) * H * W, W, tap);
        }
    }
    ensure_finite(out, "bilinear_resize");
    return out;
}

template <std::floating_point T>
NodePtr<T> bilinear_resize(const NodePtr<T>& input, int out_h, int out_w) {
    Tensor<T> out = bilinear_resize(input->value, out_h, out_w);
    auto backprop = [out_h, out_w](Node<T>& self) {
        auto& inp = self.parents[0];
        if (!inp->requires_grad) return;
        Tensor<T>& gin = inp->ensure_grad();
        const int C = gin.dim(0), H = gin.dim(1), W = gin.dim(2);
        const T sy = static_cast<T>(H) / static_cast<T>(out_h);
        const T sx = static_cast<T>(W) / static_cast<T>(out_w);
        for (int y = 0; y < out_h; ++y) {
            const T ys = (static_cast<T>(y) + T(0.5)) * sy - T(0.5);
            for (int x = 0; x < out_w; ++x) {
                const T xs = (static_cast<T>(x) + T(0.5)) * sx - T(0.5);
                auto tap = detail::make_tap(xs, ys, W, H);
                for (int c = 0; c < C; ++c) {
                    const T g = self.grad.at(c, y, x);
                    T* gp = gin.data() + static_cast<std::int64_t>(c) * H * W;
                    gp[static_cast<std::int64_t>(tap.y0) * W + tap.x0] += g * (T(1) - tap.fy) * (T(1) - tap.fx);
                    gp[static_cast<std::int64_t>(tap.y0) * W + tap.x1] += g * (T(1) - tap.fy) * tap.fx;
                    gp[static_cast<std::int64_t>(tap.y1) * W + tap.x0] += g * tap.fy * (T(1) - tap.fx);
                    gp[static_cast<std::int64_t>(tap.y1) * W + tap.x1] += g * tap.fy * tap.fx;
                }
            }
        }
    };
    return make_node<T>(std::move(out), {input}, std::move(backprop), "bilinear_resize");
}

// ---------------------------------------------------------------------------
// grid_sample — per-pixel resampling warp. offsets channel 0 is Δx, channel 1
// is Δy, in pixel units of the input grid. Gradients flow to both the input
// values and the offsets.

template <std::floating_point T>
NodePtr<T> grid_sample(const NodePtr<T>& input, const NodePtr<T>& offsets) {
    const Tensor<T>& in = input->value;
    const Tensor<T>& off = offsets->value;
    if (in.rank() != 3 || off.rank() != 3) throw DimensionError("grid_sample: expected rank-3 tensors");
    if (off.dim(0) != 2) throw DimensionError("grid_sample: offsets must have 2 channels, got " +
                                              std::to_string(off.dim(0)));
    if (off.dim(1) != in.dim(1) || off.dim(2) != in.dim(2))
        throw DimensionError("grid_sample: offsets extents must match input");
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);

    Tensor<T> out({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const T sx = static_cast<T>(x) + off.at(0, y, x);
            const T sy = static_cast<T>(y) + off.at(1, y, x);
            auto tap = detail::make_tap(sx, sy, W, H);
            for (int c = 0; c < C; ++c)
                out.at(c, y, x) = detail::sample_tap(in.data() + static_cast<std::int64_t>(c) * H * W, W, tap);
        }

    auto backprop = [](Node<T>& self) {
        auto& inp = self.parents[0];
        auto& offp = self.parents[1];
        const Tensor<T>& in = inp->value;
        const Tensor<T>& off = offp->value;
        const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
        Tensor<T>* gin = inp->requires_grad ? &inp->ensure_grad() : nullptr;
        Tensor<T>* goff = offp->requires_grad ? &offp->ensure_grad() : nullptr;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const T sx = static_cast<T>(x) + off.at(0, y, x);
                const T sy = static_cast<T>(y) + off.at(1, y, x);
                auto tap = detail::make_tap(sx, sy, W, H);
                T gx = 0, gy = 0;
                for (int c = 0; c < C; ++c) {
                    const T g = self.grad.at(c, y, x);
                    const T* p = in.data() + static_cast<std::int64_t>(c) * H * W;
                    const T v00 = p[static_cast<std::int64_t>(tap.y0) * W + tap.x0];
                    const T v01 = p[static_cast<std::int64_t>(tap.y0) * W + tap.x1];
                    const T v10 = p[static_cast<std::int64_t>(tap.y1) * W + tap.x0];
                    const T v11 = p[static_cast<std::int64_t>(tap.y1) * W + tap.x1];
                    if (gin) {
                        T* gp = gin->data() + static_cast<std::int64_t>(c) * H * W;
                        gp[static_cast<std::int64_t>(tap.y0) * W + tap.x0] += g * (T(1) - tap.fy) * (T(1) - tap.fx);
                        gp[static_cast<std::int64_t>(tap.y0) * W + tap.x1] += g * (T(1) - tap.fy) * tap.fx;
                        gp[static_cast<std::int64_t>(tap.y1) * W + tap.x0] += g * tap.fy * (T(1) - tap.fx);
                        gp[static_cast<std::int64_t>(tap.y1) * W + tap.x1] += g * tap.fy * tap.fx;
                    }
                    if (goff) {
                        gx += g * ((T(1) - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                        gy += g * ((T(1) - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                    }
                }
                if (goff) {
                    if (tap.dx_live) goff->at(0, y, x) += gx;
                    if (tap.dy_live) goff->at(1, y, x) += gy;
                }
            }
    };
    return make_node<T>(std::move(out), {input, offsets}, std::move(backprop), "grid_sample");
}

// ---------------------------------------------------------------------------
// deform_conv2d — kernel taps displaced per pixel by learned offsets
// (channel layout Δx_1, Δy_1, …, Δx_{k²}, Δy_{k²}), bilinear sampling with
// clamp-to-edge, no modulation, no bias. With all offsets zero this reduces
// exactly to conv2d at stride 1.

namespace detail {

// Sampled patch matrix: rows (ci*k² + i), columns (y*W + x).
template <std::floating_point T>
void deform_im2col(const Tensor<T>& in, const Tensor<T>& off, int k, T* col) {
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int c0 = (k - 1) / 2;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int i = 0; i < k * k; ++i) {
        const int dy = i / k - c0, dx = i % k - c0;
        const T* ox = off.data() + static_cast<std::int64_t>(2 * i) * plane;
        const T* oy = off.data() + static_cast<std::int64_t>(2 * i + 1) * plane;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
                auto tap = make_tap(static_cast<T>(x + dx) + ox[p], static_cast<T>(y + dy) + oy[p], W, H);
                for (int ci = 0; ci < C; ++ci)
                    col[(static_cast<std::int64_t>(ci) * k * k + i) * plane + p] =
                        sample_tap(in.data() + static_cast<std::int64_t>(ci) * plane, W, tap);
            }
    }
}

}  // namespace detail

template <std::floating_point T>
NodePtr<T> deform_conv2d(const NodePtr<T>& input, const NodePtr<T>& weight, const NodePtr<T>& offsets) {
    const Tensor<T>& in = input->value;
    const Tensor<T>& w = weight->value;
    const Tensor<T>& off = offsets->value;
    if (in.rank() != 3 || w.rank() != 4 || off.rank() != 3)
        throw DimensionError("deform_conv2d: expected input {C,H,W}, weight {O,I,k,k}, offsets {2k2,H,W}");
    const int cin = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin || w.dim(3) != k || k % 2 == 0)
        throw DimensionError("deform_conv2d: weight must be {O," + std::to_string(cin) + ",k,k} with odd k");
    if (off.dim(0) != 2 * k * k)
        throw DimensionError("deform_conv2d: offsets must have " + std::to_string(2 * k * k) + " channels, got " +
                             std::to_string(off.dim(0)));
    if (off.dim(1) != H || off.dim(2) != W) throw DimensionError("deform_conv2d: offsets extents must match input");

    const int K = cin * k * k;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    auto& col = detail::scratch_a<T>(static_cast<size_t>(K) * plane);
    detail::deform_im2col(in, off, k, col.data());
    Tensor<T> out({cout, H, W});
    detail::matmul(cout, K, static_cast<int>(plane), w.data(), col.data(), out.data());

    auto backprop = [k, K, plane](Node<T>& self) {
        auto& inp = self.parents[0];
        auto& wp = self.parents[1];
        auto& offp = self.parents[2];
        const Tensor<T>& in = inp->value;
        const Tensor<T>& off = offp->value;
        const int cin = in.dim(0), H = in.dim(1), W = in.dim(2);
        const int cout = self.value.dim(0);
        const int c0 = (k - 1) / 2;
        const T* gout = self.grad.data();

        if (wp->requires_grad) {
            auto& col = detail::scratch_a<T>(static_cast<size_t>(K) * plane);
            detail::deform_im2col(in, off, k, col.data());
            detail::gemm(false, true, cout, static_cast<int>(plane), K, gout, col.data(),
                         wp->ensure_grad().data(), true);
        }
        if (inp->requires_grad || offp->requires_grad) {
            auto& gcol = detail::scratch_b<T>(static_cast<size_t>(K) * plane);
            detail::gemm(true, false, K, cout, static_cast<int>(plane), wp->value.data(), gout, gcol.data());

            Tensor<T>* gin = inp->requires_grad ? &inp->ensure_grad() : nullptr;
            Tensor<T>* goff = offp->requires_grad ? &offp->ensure_grad() : nullptr;
            for (int i = 0; i < k * k; ++i) {
                const int dy = i / k - c0, dx = i % k - c0;
                const T* ox = off.data() + static_cast<std::int64_t>(2 * i) * plane;
                const T* oy = off.data() + static_cast<std::int64_t>(2 * i + 1) * plane;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
                        auto tap = detail::make_tap(static_cast<T>(x + dx) + ox[p], static_cast<T>(y + dy) + oy[p], W, H);
                        T gx = 0, gy = 0;
                        for (int ci = 0; ci < cin; ++ci) {
                            const T g = gcol[(static_cast<std::int64_t>(ci) * k * k + i) * plane + p];
                            const T* ip = in.data() + static_cast<std::int64_t>(ci) * plane;
                            const T v00 = ip[static_cast<std::int64_t>(tap.y0) * W + tap.x0];
                            const T v01 = ip[static_cast<std::int64_t>(tap.y0) * W + tap.x1];
                            const T v10 = ip[static_cast<std::int64_t>(tap.y1) * W + tap.x0];
                            const T v11 = ip[static_cast<std::int64_t>(tap.y1) * W + tap.x1];
                            if (gin) {
                                T* gp = gin->data() + static_cast<std::int64_t>(ci) * plane;
                                gp[static_cast<std::int64_t>(tap.y0) * W + tap.x0] += g * (T(1) - tap.fy) * (T(1) - tap.fx);
                                gp[static_cast<std::int64_t>(tap.y0) * W + tap.x1] += g * (T(1) - tap.fy) * tap.fx;
                                gp[static_cast<std::int64_t>(tap.y1) * W + tap.x0] += g * tap.fy * (T(1) - tap.fx);
                                gp[static_cast<std::int64_t>(tap.y1) * W + tap.x1] += g * tap.fy * tap.fx;
                            }
                            if (goff) {
                                gx += g * ((T(1) - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                                gy += g * ((T(1) - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                            }
                        }
                        if (goff) {
                            if (tap.dx_live) goff->at(2 * i, y, x) += gx;
                            if (tap.dy_live) goff->at(2 * i + 1, y, x) += gy;
                        }
                    }
            }
        }
    };
    return make_node<T>(std::move(out), {input, weight, offsets}, std::move(backprop), "deform_conv2d");
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <std::floating_point T>
NodePtr<T> leaky_relu(const NodePtr<T>& input, T slope) {
    const Tensor<T>& in = input->value;
    Tensor<T> out(in.shape());
    for (std::int64_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : slope * in[i];
    auto backprop = [slope](Node<T>& self) {
        auto& inp = self.parents[0];
        if (!inp->requires_grad) return;
        Tensor<T>& gin = inp->ensure_grad();
        for (std::int64_t i = 0; i < gin.size(); ++i)
            gin[i] += self.grad[i] * (inp->value[i] > T(0) ? T(1) : slope);
    };
    return make_node<T>(std::move(out), {input}, std::move(backprop), "leaky_relu");
}

template <std::floating_point T>
NodePtr<T> concat_channels(const NodePtr<T>& a, const NodePtr<T>& b) {
    const Tensor<T>& ta = a->value;
    const Tensor<T>& tb = b->value;
    if (ta.rank() != 3 || tb.rank() != 3) throw DimensionError("concat_channels: expected rank-3 tensors");
    if (ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2))
        throw DimensionError("concat_channels: spatial mismatch " + ta.shape_string() + " vs " + tb.shape_string());
    Tensor<T> out({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
    std::copy(ta.values().begin(), ta.values().end(), out.values().begin());
    std::copy(tb.values().begin(), tb.values().end(), out.values().begin() + ta.size());
    auto backprop = [](Node<T>& self) {
        auto& ap = self.parents[0];
        auto& bp = self.parents[1];
        const std::int64_t na = ap->value.size();
        if (ap->requires_grad) {
            Tensor<T>& ga = ap->ensure_grad();
            for (std::int64_t i = 0; i < na; ++i) ga[i] += self.grad[i];
        }
        if (bp->requires_grad) {
            Tensor<T>& gb = bp->ensure_grad();
            for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[na + i];
        }
    };
    return make_node<T>(std::move(out), {a, b}, std::move(backprop), "concat_channels");
}

// Mean absolute difference against a fixed target; subgradient 0 at ties.
template <std::floating_point T>
NodePtr<T> l1_mean(const NodePtr<T>& a, const Tensor<T>& b) {
    ensure_same_shape(a->value, b, "l1_mean");
    const std::int64_t n = b.size();
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += std::abs(a->value[i] - b[i]);
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    auto backprop = [b](Node<T>& self) {
        auto& ap = self.parents[0];
        if (!ap->requires_grad) return;
        Tensor<T>& ga = ap->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(b.size());
        for (std::int64_t i = 0; i < b.size(); ++i) {
            const T d = ap->value[i] - b[i];
            if (d > T(0))
                ga[i] += g;
            else if (d < T(0))
                ga[i] -= g;
        }
    };
    return make_node<T>(std::move(out), {a}, std::move(backprop), "l1_mean");
}

template <std::floating_point T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    ensure_same_shape(a->value, b->value, "add");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    auto backprop = [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            Tensor<T>& g = p->ensure_grad();
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    };
    return make_node<T>(std::move(out), {a, b}, std::move(backprop), "add");
}

template <std::floating_point T>
NodePtr<T> scale(const NodePtr<T>& a, T s) {
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
    auto backprop = [s](Node<T>& self) {
        auto& ap = self.parents[0];
        if (!ap->requires_grad) return;
        Tensor<T>& g = ap->ensure_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    };
    return make_node<T>(std::move(out), {a}, std::move(backprop), "scale");
}

// y = x/(1+|x|/s): identity-like near zero, saturating toward ±s with a
// slowly decaying slope, so saturated values keep usable gradients.
template <std::floating_point T>
NodePtr<T> soft_bound(const NodePtr<T>& a, T s) {
    if (!(s > T(0))) throw ContractError("soft_bound: scale must be positive");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const T x = a->value[i];
        out[i] = x / (T(1) + std::abs(x) / s);
    }
    auto backprop = [s](Node<T>& self) {
        auto& ap = self.parents[0];
        if (!ap->requires_grad) return;
        Tensor<T>& g = ap->ensure_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const T d = T(1) + std::abs(ap->value[i]) / s;
            g[i] += self.grad[i] / (d * d);
        }
    };
    return make_node<T>(std::move(out), {a}, std::move(backprop), "soft_bound");
}

template <std::floating_point T>
NodePtr<T> sum_all(const NodePtr<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(a->value.sum());
    auto backprop = [](Node<T>& self) {
        auto& ap = self.parents[0];
        if (!ap->requires_grad) return;
        Tensor<T>& g = ap->ensure_grad();
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    };
    return make_node<T>(std::move(out), {a}, std::move(backprop), "sum_all");
}

}  // namespace robself::diff
