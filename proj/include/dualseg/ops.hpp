#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dualseg/kernels.hpp"
#include "dualseg/tensor.hpp"

// Tape-recorded tensor operations. Forward results are plain value tensors;
// when the tape is enabled and an input requires grad, a backward closure is
// recorded. Backward closures accumulate additively into input grads and
// skip work for inputs that do not require grad.
namespace dualseg::ops {

using dualseg::Tape;
using dualseg::Tensor;

struct Conv2dSpec {
    int64_t stride_h = 1, stride_w = 1;
    int64_t pad_h = 0, pad_w = 0;
};

namespace detail {

template <typename T>
bool track(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape.enabled()) return false;
    for (const Tensor<T>* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

inline void expect_rank4(const Shape& s, const char* op, const char* name) {
    if (s.size() != 4)
        throw ShapeError(std::string(op) + ": " + name + " must be rank 4, got " + shape_str(s));
}

template <typename T>
inline void ew_parallel_hint(int64_t) {}

}  // namespace detail

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const Conv2dSpec& spec = {}) {
    detail::expect_rank4(input.shape(), "conv2d", "input");
    detail::expect_rank4(weight.shape(), "conv2d", "weight");
    if (input.dim(1) != weight.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(input.dim(1)) + " (shape " +
                         shape_str(input.shape()) + ") do not match weight input channels " +
                         std::to_string(weight.dim(1)) + " (shape " + shape_str(weight.shape()) + ")");
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match weight output channels " + std::to_string(weight.dim(0)));

    const auto d = kernels::conv_dims(input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                                      weight.dim(0), weight.dim(2), weight.dim(3), spec.stride_h,
                                      spec.stride_w, spec.pad_h, spec.pad_w);
    Tensor<T> out({d.B, d.Cout, d.OH, d.OW});
    kernels::conv2d_forward(d, input.data(), weight.data(), bias.data(), out.data());
    dualseg::detail::check_finite(out, "conv2d");

    if (detail::track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor<T> in = input, w = weight, b = bias, o = out;
        tape.record("conv2d", [in, w, b, o, d]() mutable {
            if (!o.has_grad()) return;
            const T* g = o.grad();
            if (in.requires_grad()) {
                in.ensure_grad();
                kernels::conv2d_backward_input(d, w.data(), g, in.grad());
            }
            if (w.requires_grad()) {
                w.ensure_grad();
                kernels::conv2d_backward_weight(d, in.data(), g, w.grad());
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                kernels::conv2d_backward_bias(d, g, b.grad());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Train mode normalizes with batch statistics and folds them into the
// running estimates (biased variance); infer mode uses the running
// estimates. running_mean/running_var are state, mutated in train mode.
template <typename T>
Tensor<T> batch_norm2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                       bool training, T momentum, T eps) {
    detail::expect_rank4(input.shape(), "batch_norm2d", "input");
    const int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw ShapeError("batch_norm2d: parameter size does not match " + std::to_string(C) +
                         " channels (input " + shape_str(input.shape()) + ")");

    Tensor<T> out(input.shape());
    if (training) {
        if (B * H * W < 2)
            throw ValueError("batch_norm2d: train mode requires B*H*W >= 2, got " +
                             shape_str(input.shape()));
        Tensor<T> mean({C}), inv_std({C});
        kernels::bn_train_forward(B, C, H, W, input.data(), gamma.data(), beta.data(), eps,
                                  out.data(), mean.data(), inv_std.data());
        T* rm = running_mean.data();
        T* rv = running_var.data();
        const T* m = mean.data();
        const T* is = inv_std.data();
        for (int64_t c = 0; c < C; ++c) {
            const T var = T(1) / (is[c] * is[c]) - eps;
            rm[c] = momentum * rm[c] + (T(1) - momentum) * m[c];
            rv[c] = momentum * rv[c] + (T(1) - momentum) * var;
        }
        dualseg::detail::check_finite(out, "batch_norm2d");
        if (detail::track(tape, {&input, &gamma, &beta})) {
            out.set_requires_grad(true);
            Tensor<T> in = input, g = gamma, bt = beta, o = out;
            tape.record("batch_norm2d", [in, g, bt, o, mean, inv_std, B, C, H, W]() mutable {
                if (!o.has_grad()) return;
                // The joint formula needs din even when only gamma/beta are
                // checked; scratch absorbs it in that case.
                Tensor<T> scratch;
                T* din = nullptr;
                if (in.requires_grad()) {
                    in.ensure_grad();
                    din = in.grad();
                } else {
                    scratch = Tensor<T>(in.shape());
                    din = scratch.data();
                }
                g.ensure_grad();
                bt.ensure_grad();
                kernels::bn_train_backward(B, C, H, W, in.data(), g.data(), mean.data(),
                                           inv_std.data(), o.grad(), din, g.grad(), bt.grad());
            });
        }
    } else {
        const int64_t plane = H * W;
        const T* x = input.data();
        const T* gm = gamma.data();
        const T* bt = beta.data();
        const T* rm = running_mean.data();
        const T* rv = running_var.data();
        T* y = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* plane))
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                const T inv = T(1) / std::sqrt(rv[c] + eps);
                const T scale = gm[c] * inv;
                const T shift = bt[c] - rm[c] * scale;
                const T* xi = x + ((b * C + c) * H) * W;
                T* yi = y + ((b * C + c) * H) * W;
                for (int64_t i = 0; i < plane; ++i) yi[i] = xi[i] * scale + shift;
            }
        dualseg::detail::check_finite(out, "batch_norm2d");
        if (detail::track(tape, {&input, &gamma, &beta})) {
            out.set_requires_grad(true);
            Tensor<T> in = input, g = gamma, btt = beta, o = out;
            Tensor<T> rmc = running_mean.clone(), rvc = running_var.clone();
            tape.record("batch_norm2d_infer", [in, g, btt, o, rmc, rvc, B, C, H, W, eps]() mutable {
                if (!o.has_grad()) return;
                const int64_t plane = H * W;
                const T* go = o.grad();
                const T* x = in.data();
                for (int64_t c = 0; c < C; ++c) {
                    const T inv = T(1) / std::sqrt(rvc.data()[c] + eps);
                    double dg = 0.0, db = 0.0;
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gi = go + ((b * C + c) * H) * W;
                        const T* xi = x + ((b * C + c) * H) * W;
                        for (int64_t i = 0; i < plane; ++i) {
                            db += gi[i];
                            dg += gi[i] * (xi[i] - rmc.data()[c]) * inv;
                        }
                    }
                    if (g.requires_grad()) {
                        g.ensure_grad();
                        g.grad()[c] += static_cast<T>(dg);
                    }
                    if (btt.requires_grad()) {
                        btt.ensure_grad();
                        btt.grad()[c] += static_cast<T>(db);
                    }
                    if (in.requires_grad()) {
                        in.ensure_grad();
                        const T k = g.data()[c] * inv;
                        for (int64_t b = 0; b < B; ++b) {
                            const T* gi = go + ((b * C + c) * H) * W;
                            T* di = in.grad() + ((b * C + c) * H) * W;
                            for (int64_t i = 0; i < plane; ++i) di[i] += k * gi[i];
                        }
                    }
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* p = x.data();
    T* q = out.data();
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
    for (int64_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        tape.record("relu", [in, o]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            const T* g = o.grad();
            const T* p = in.data();
            T* d = in.grad();
            const int64_t n = in.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
            for (int64_t i = 0; i < n; ++i)
                if (p[i] > T(0)) d[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* p = x.data();
    T* q = out.data();
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
    for (int64_t i = 0; i < n; ++i) q[i] = T(1) / (T(1) + std::exp(-p[i]));
    dualseg::detail::check_finite(out, "sigmoid");
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        tape.record("sigmoid", [in, o]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            const T* g = o.grad();
            const T* y = o.data();
            T* d = in.grad();
            const int64_t n = in.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
            for (int64_t i = 0; i < n; ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* q = out.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
    for (int64_t i = 0; i < n; ++i) q[i] = pa[i] + pb[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, o = out;
        tape.record("add", [ta, tb, o]() mutable {
            if (!o.has_grad()) return;
            const T* g = o.grad();
            const int64_t n = o.numel();
            for (Tensor<T>* t : {&ta, &tb}) {
                if (!t->requires_grad()) continue;
                t->ensure_grad();
                T* d = t->grad();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
                for (int64_t i = 0; i < n; ++i) d[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* q = out.data();
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static) if (kernels::use_parallel(n))
    for (int64_t i = 0; i < n; ++i) q[i] = pa[i] * pb[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, o = out;
        tape.record("mul", [ta, tb, o]() mutable {
            if (!o.has_grad()) return;
            const T* g = o.grad();
            const int64_t n = o.numel();
            if (ta.requires_grad()) {
                ta.ensure_grad();
                T* d = ta.grad();
                const T* pb = tb.data();
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * pb[i];
            }
            if (tb.requires_grad()) {
                tb.ensure_grad();
                T* d = tb.grad();
                const T* pa = ta.data();
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * pa[i];
            }
        });
    }
    return out;
}

// x[B,C,H,W] scaled per channel by gate[B,C,1,1].
template <typename T>
Tensor<T> scale_channels(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gate) {
    detail::expect_rank4(x.shape(), "scale_channels", "input");
    detail::expect_rank4(gate.shape(), "scale_channels", "gate");
    if (gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(1) || gate.dim(2) != 1 || gate.dim(3) != 1)
        throw ShapeError("scale_channels: gate " + shape_str(gate.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    const T* p = x.data();
    const T* gt = gate.data();
    T* q = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* plane))
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T s = gt[b * C + c];
            const T* xi = p + (b * C + c) * plane;
            T* yi = q + (b * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) yi[i] = xi[i] * s;
        }
    if (detail::track(tape, {&x, &gate})) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, tg = gate, o = out;
        tape.record("scale_channels", [tx, tg, o, B, C, plane]() mutable {
            if (!o.has_grad()) return;
            const T* g = o.grad();
            if (tx.requires_grad()) {
                tx.ensure_grad();
                T* d = tx.grad();
                const T* gt = tg.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* plane))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const T s = gt[b * C + c];
                        const T* gi = g + (b * C + c) * plane;
                        T* di = d + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) di[i] += gi[i] * s;
                    }
            }
            if (tg.requires_grad()) {
                tg.ensure_grad();
                T* d = tg.grad();
                const T* p = tx.data();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* gi = g + (b * C + c) * plane;
                        const T* xi = p + (b * C + c) * plane;
                        double acc = 0.0;
                        for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(gi[i]) * xi[i];
                        d[b * C + c] += static_cast<T>(acc);
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& x, int64_t k, int64_t stride, int64_t pad) {
    detail::expect_rank4(x.shape(), "maxpool2d", "input");
    const auto d = kernels::pool_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, pad);
    Tensor<T> out({d.B, d.C, d.OH, d.OW});
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    kernels::maxpool_forward(d, x.data(), out.data(), argmax.data());
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        auto amax = std::make_shared<std::vector<int64_t>>(std::move(argmax));
        tape.record("maxpool2d", [in, o, amax, d]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            kernels::maxpool_backward(d, o.grad(), amax->data(), in.grad());
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(Tape<T>& tape, const Tensor<T>& x) {
    detail::expect_rank4(x.shape(), "upsample_nearest2x", "input");
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out({B, C, H * 2, W * 2});
    const T* p = x.data();
    T* q = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* H* W))
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* xi = p + ((b * C + c) * H) * W;
            T* yi = q + ((b * C + c) * H * 2) * W * 2;
            for (int64_t y = 0; y < 2 * H; ++y) {
                const T* row = xi + (y / 2) * W;
                T* orow = yi + y * 2 * W;
                for (int64_t xcol = 0; xcol < 2 * W; ++xcol) orow[xcol] = row[xcol / 2];
            }
        }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        tape.record("upsample_nearest2x", [in, o, B, C, H, W]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            const T* g = o.grad();
            T* d = in.grad();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* H* W))
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gi = g + ((b * C + c) * H * 2) * W * 2;
                    T* di = d + ((b * C + c) * H) * W;
                    for (int64_t y = 0; y < H; ++y)
                        for (int64_t xcol = 0; xcol < W; ++xcol) {
                            const T* g00 = gi + (2 * y) * 2 * W + 2 * xcol;
                            const T* g10 = gi + (2 * y + 1) * 2 * W + 2 * xcol;
                            di[y * W + xcol] += g00[0] + g00[1] + g10[0] + g10[1];
                        }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ValueError("concat_channels: no inputs");
    const int64_t B = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int64_t C = 0;
    for (const auto& x : xs) {
        detail::expect_rank4(x.shape(), "concat_channels", "input");
        if (x.dim(0) != B || x.dim(2) != H || x.dim(3) != W)
            throw ShapeError("concat_channels: mismatched dims " + shape_str(x.shape()) + " vs " +
                             shape_str(xs[0].shape()));
        C += x.dim(1);
    }
    Tensor<T> out({B, C, H, W});
    const int64_t plane = H * W;
    T* q = out.data();
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t xc = x.dim(1);
        const T* p = x.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* xc* plane))
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < xc; ++c)
                std::copy_n(p + (b * xc + c) * plane, plane, q + (b * C + coff + c) * plane);
        coff += xc;
    }
    bool wants = false;
    for (const auto& x : xs) wants = wants || x.requires_grad();
    if (tape.enabled() && wants) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> ins = xs;
        Tensor<T> o = out;
        tape.record("concat_channels", [ins, o, B, C, plane]() mutable {
            if (!o.has_grad()) return;
            const T* g = o.grad();
            int64_t coff = 0;
            for (auto& x : ins) {
                const int64_t xc = x.dim(1);
                if (x.requires_grad()) {
                    x.ensure_grad();
                    T* d = x.grad();
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t c = 0; c < xc; ++c) {
                            const T* gi = g + (b * C + coff + c) * plane;
                            T* di = d + (b * xc + c) * plane;
                            for (int64_t i = 0; i < plane; ++i) di[i] += gi[i];
                        }
                }
                coff += xc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
    detail::expect_rank4(x.shape(), "global_avg_pool", "input");
    const int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out({B, C, 1, 1});
    const T* p = x.data();
    T* q = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (kernels::use_parallel(B* C* plane))
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const T* xi = p + (b * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) acc += xi[i];
            q[b * C + c] = static_cast<T>(acc / static_cast<double>(plane));
        }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        tape.record("global_avg_pool", [in, o, B, C, plane]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            const T* g = o.grad();
            T* d = in.grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const T k = g[b * C + c] / static_cast<T>(plane);
                    T* di = d + (b * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) di[i] += k;
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
    double acc = 0.0;
    const T* p = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += p[i];
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor<T> in = x, o = out;
        tape.record("sum_all", [in, o]() mutable {
            if (!o.has_grad()) return;
            in.ensure_grad();
            const T g = o.grad()[0];
            T* d = in.grad();
            for (int64_t i = 0; i < in.numel(); ++i) d[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss nodes. gt is a constant: no gradient flows into it.
// ---------------------------------------------------------------------------

inline constexpr double kBceClampEps = 1e-7;

template <typename T>
Tensor<T> bce_mean(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("bce_mean: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(gt.shape()));
    const int64_t n = pred.numel();
    const T* p = pred.data();
    const T* g = gt.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), kBceClampEps, 1.0 - kBceClampEps);
        acc -= static_cast<double>(g[i]) * std::log(pc) +
               (1.0 - static_cast<double>(g[i])) * std::log(1.0 - pc);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (detail::track(tape, {&pred})) {
        out.set_requires_grad(true);
        Tensor<T> tp = pred, tg = gt, o = out;
        tape.record("bce_mean", [tp, tg, o, n]() mutable {
            if (!o.has_grad()) return;
            tp.ensure_grad();
            const T go = o.grad()[0];
            const T* p = tp.data();
            const T* g = tg.data();
            T* d = tp.grad();
            for (int64_t i = 0; i < n; ++i) {
                const double pv = static_cast<double>(p[i]);
                if (pv <= kBceClampEps || pv >= 1.0 - kBceClampEps) continue;  // clamped: flat
                const double gi = static_cast<double>(g[i]);
                d[i] += go * static_cast<T>((pv - gi) / (pv * (1.0 - pv) * static_cast<double>(n)));
            }
        });
    }
    return out;
}

// Differentiable IoU relaxation: 1 - sum(p*g) / (sum(p*g) + sum(p*(1-g)) + sum((1-p)*g)).
// Equals 1 - TP/(TP+FP+FN) exactly when pred is binary. Empty-vs-empty is 0.
template <typename T>
Tensor<T> soft_iou(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("soft_iou: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(gt.shape()));
    const int64_t n = pred.numel();
    const T* p = pred.data();
    const T* g = gt.data();
    double inter = 0.0, uni = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double pv = p[i], gv = g[i];
        inter += pv * gv;
        uni += pv + gv - pv * gv;
    }
    const double loss = uni > 0.0 ? 1.0 - inter / uni : 0.0;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
    if (detail::track(tape, {&pred})) {
        out.set_requires_grad(true);
        Tensor<T> tp = pred, tg = gt, o = out;
        tape.record("soft_iou", [tp, tg, o, n, inter, uni]() mutable {
            if (!o.has_grad() || uni <= 0.0) return;
            tp.ensure_grad();
            const T go = o.grad()[0];
            const T* g = tg.data();
            T* d = tp.grad();
            for (int64_t i = 0; i < n; ++i) {
                const double gv = g[i];
                // d(1 - I/U)/dp_i with dI/dp_i = g_i and dU/dp_i = 1 - g_i.
                d[i] += go * static_cast<T>(-(gv * uni - inter * (1.0 - gv)) / (uni * uni));
            }
        });
    }
    return out;
}

}  // namespace dualseg::ops
