#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>

#include "dualseg/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Compute kernels backing the autodiff ops. Each heavy kernel comes in two
// flavours: a *_serial reference and an *_omp variant. Both compute every
// output element with the same inner summation order, so their results are
// bit-identical and the omp variants stay deterministic for any thread
// count. Backward kernels are gather-style (one writer per element) and
// accumulate (+=) into the gradient buffers.
namespace dualseg::kernels {

inline int threads_available() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline bool use_parallel(int64_t work) {
    return work >= (int64_t(1) << 14) && threads_available() > 1;
}

inline int64_t div_floor(int64_t a, int64_t b) {
    int64_t q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int64_t div_ceil(int64_t a, int64_t b) { return -div_floor(-a, b); }

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvDims {
    int64_t B, Cin, H, W;
    int64_t Cout, kh, kw;
    int64_t sh, sw, ph, pw;
    int64_t OH, OW;
};

inline ConvDims conv_dims(int64_t B, int64_t Cin, int64_t H, int64_t W, int64_t Cout,
                          int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw) {
    if (H + 2 * ph < kh || W + 2 * pw < kw)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(H + 2 * ph) + "x" +
                         std::to_string(W + 2 * pw));
    ConvDims d{B, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw, 0, 0};
    d.OH = (H + 2 * ph - kh) / sh + 1;
    d.OW = (W + 2 * pw - kw) / sw + 1;
    return d;
}

namespace detail {

template <typename T>
inline void conv2d_forward_bco(const ConvDims& d, const T* in, const T* w, const T* bias,
                               T* out, int64_t b, int64_t co) {
    const T* wco = w + co * d.Cin * d.kh * d.kw;
    const T bco = bias ? bias[co] : T(0);
    T* orow = out + ((b * d.Cout + co) * d.OH) * d.OW;
    for (int64_t oy = 0; oy < d.OH; ++oy) {
        const int64_t iy0 = oy * d.sh - d.ph;
        const int64_t ky_lo = std::max<int64_t>(0, -iy0);
        const int64_t ky_hi = std::min(d.kh, d.H - iy0);
        for (int64_t ox = 0; ox < d.OW; ++ox) {
            const int64_t ix0 = ox * d.sw - d.pw;
            const int64_t kx_lo = std::max<int64_t>(0, -ix0);
            const int64_t kx_hi = std::min(d.kw, d.W - ix0);
            T acc = bco;
            for (int64_t ci = 0; ci < d.Cin; ++ci) {
                const T* iplane = in + ((b * d.Cin + ci) * d.H) * d.W;
                const T* wplane = wco + ci * d.kh * d.kw;
                for (int64_t ky = ky_lo; ky < ky_hi; ++ky) {
                    const T* irow = iplane + (iy0 + ky) * d.W + ix0;
                    const T* wrow = wplane + ky * d.kw;
                    for (int64_t kx = kx_lo; kx < kx_hi; ++kx) acc += irow[kx] * wrow[kx];
                }
            }
            orow[oy * d.OW + ox] = acc;
        }
    }
}

template <typename T>
inline void conv2d_backward_input_bci(const ConvDims& d, const T* w, const T* gout,
                                      T* din, int64_t b, int64_t ci) {
    T* dplane = din + ((b * d.Cin + ci) * d.H) * d.W;
    for (int64_t iy = 0; iy < d.H; ++iy) {
        for (int64_t ix = 0; ix < d.W; ++ix) {
            T acc = T(0);
            for (int64_t co = 0; co < d.Cout; ++co) {
                const T* gplane = gout + ((b * d.Cout + co) * d.OH) * d.OW;
                const T* wplane = w + (co * d.Cin + ci) * d.kh * d.kw;
                for (int64_t ky = 0; ky < d.kh; ++ky) {
                    const int64_t ynum = iy + d.ph - ky;
                    if (ynum % d.sh != 0) continue;
                    const int64_t oy = ynum / d.sh;
                    if (oy < 0 || oy >= d.OH) continue;
                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                        const int64_t xnum = ix + d.pw - kx;
                        if (xnum % d.sw != 0) continue;
                        const int64_t ox = xnum / d.sw;
                        if (ox < 0 || ox >= d.OW) continue;
                        acc += wplane[ky * d.kw + kx] * gplane[oy * d.OW + ox];
                    }
                }
            }
            dplane[iy * d.W + ix] += acc;
        }
    }
}

template <typename T>
inline void conv2d_backward_weight_cc(const ConvDims& d, const T* in, const T* gout,
                                      T* dw, int64_t co, int64_t ci) {
    T* wplane = dw + (co * d.Cin + ci) * d.kh * d.kw;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
        for (int64_t kx = 0; kx < d.kw; ++kx) {
            T acc = T(0);
            for (int64_t b = 0; b < d.B; ++b) {
                const T* iplane = in + ((b * d.Cin + ci) * d.H) * d.W;
                const T* gplane = gout + ((b * d.Cout + co) * d.OH) * d.OW;
                for (int64_t oy = 0; oy < d.OH; ++oy) {
                    const int64_t iy = oy * d.sh - d.ph + ky;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int64_t ox = 0; ox < d.OW; ++ox) {
                        const int64_t ix = ox * d.sw - d.pw + kx;
                        if (ix < 0 || ix >= d.W) continue;
                        acc += iplane[iy * d.W + ix] * gplane[oy * d.OW + ox];
                    }
                }
            }
            wplane[ky * d.kw + kx] += acc;
        }
    }
}

}  // namespace detail

template <typename T>
void conv2d_forward_serial(const ConvDims& d, const T* in, const T* w, const T* bias, T* out) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t co = 0; co < d.Cout; ++co) detail::conv2d_forward_bco(d, in, w, bias, out, b, co);
}

template <typename T>
void conv2d_forward_omp(const ConvDims& d, const T* in, const T* w, const T* bias, T* out) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t co = 0; co < d.Cout; ++co) detail::conv2d_forward_bco(d, in, w, bias, out, b, co);
}

template <typename T>
void conv2d_forward(const ConvDims& d, const T* in, const T* w, const T* bias, T* out) {
    if (use_parallel(d.B * d.Cout * d.OH * d.OW * d.Cin * d.kh * d.kw))
        conv2d_forward_omp(d, in, w, bias, out);
    else
        conv2d_forward_serial(d, in, w, bias, out);
}

template <typename T>
void conv2d_backward_input_serial(const ConvDims& d, const T* w, const T* gout, T* din) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t ci = 0; ci < d.Cin; ++ci) detail::conv2d_backward_input_bci(d, w, gout, din, b, ci);
}

template <typename T>
void conv2d_backward_input_omp(const ConvDims& d, const T* w, const T* gout, T* din) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t ci = 0; ci < d.Cin; ++ci) detail::conv2d_backward_input_bci(d, w, gout, din, b, ci);
}

template <typename T>
void conv2d_backward_input(const ConvDims& d, const T* w, const T* gout, T* din) {
    if (use_parallel(d.B * d.Cin * d.H * d.W * d.Cout))
        conv2d_backward_input_omp(d, w, gout, din);
    else
        conv2d_backward_input_serial(d, w, gout, din);
}

template <typename T>
void conv2d_backward_weight_serial(const ConvDims& d, const T* in, const T* gout, T* dw) {
    for (int64_t co = 0; co < d.Cout; ++co)
        for (int64_t ci = 0; ci < d.Cin; ++ci) detail::conv2d_backward_weight_cc(d, in, gout, dw, co, ci);
}

template <typename T>
void conv2d_backward_weight_omp(const ConvDims& d, const T* in, const T* gout, T* dw) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < d.Cout; ++co)
        for (int64_t ci = 0; ci < d.Cin; ++ci) detail::conv2d_backward_weight_cc(d, in, gout, dw, co, ci);
}

template <typename T>
void conv2d_backward_weight(const ConvDims& d, const T* in, const T* gout, T* dw) {
    if (use_parallel(d.Cout * d.Cin * d.kh * d.kw * d.B * d.OH * d.OW))
        conv2d_backward_weight_omp(d, in, gout, dw);
    else
        conv2d_backward_weight_serial(d, in, gout, dw);
}

template <typename T>
void conv2d_backward_bias(const ConvDims& d, const T* gout, T* db) {
    const int64_t plane = d.OH * d.OW;
#pragma omp parallel for schedule(static) if (use_parallel(d.Cout* d.B* plane))
    for (int64_t co = 0; co < d.Cout; ++co) {
        T acc = T(0);
        for (int64_t b = 0; b < d.B; ++b) {
            const T* g = gout + ((b * d.Cout + co) * d.OH) * d.OW;
            for (int64_t i = 0; i < plane; ++i) acc += g[i];
        }
        db[co] += acc;
    }
}

// ---------------------------------------------------------------------------
// maxpool2d (padding cells never win; ties keep the first maximum in scan
// order, which pins the backward routing)
// ---------------------------------------------------------------------------

struct PoolDims {
    int64_t B, C, H, W;
    int64_t k, s, p;
    int64_t OH, OW;
};

inline PoolDims pool_dims(int64_t B, int64_t C, int64_t H, int64_t W, int64_t k, int64_t s, int64_t p) {
    if (H + 2 * p < k || W + 2 * p < k)
        throw ShapeError("maxpool2d: window " + std::to_string(k) + " exceeds padded input");
    PoolDims d{B, C, H, W, k, s, p, 0, 0};
    d.OH = (H + 2 * p - k) / s + 1;
    d.OW = (W + 2 * p - k) / s + 1;
    return d;
}

namespace detail {

template <typename T>
inline void maxpool_forward_bc(const PoolDims& d, const T* in, T* out, int64_t* argmax,
                               int64_t b, int64_t c) {
    const T* iplane = in + ((b * d.C + c) * d.H) * d.W;
    const int64_t base = ((b * d.C + c) * d.H) * d.W;
    T* oplane = out + ((b * d.C + c) * d.OH) * d.OW;
    int64_t* aplane = argmax + ((b * d.C + c) * d.OH) * d.OW;
    for (int64_t oy = 0; oy < d.OH; ++oy) {
        const int64_t y0 = oy * d.s - d.p;
        const int64_t ky_lo = std::max<int64_t>(0, -y0);
        const int64_t ky_hi = std::min(d.k, d.H - y0);
        for (int64_t ox = 0; ox < d.OW; ++ox) {
            const int64_t x0 = ox * d.s - d.p;
            const int64_t kx_lo = std::max<int64_t>(0, -x0);
            const int64_t kx_hi = std::min(d.k, d.W - x0);
            T best = std::numeric_limits<T>::lowest();
            int64_t best_idx = -1;
            for (int64_t ky = ky_lo; ky < ky_hi; ++ky) {
                const int64_t iy = y0 + ky;
                for (int64_t kx = kx_lo; kx < kx_hi; ++kx) {
                    const int64_t ix = x0 + kx;
                    const T v = iplane[iy * d.W + ix];
                    if (v > best) {
                        best = v;
                        best_idx = base + iy * d.W + ix;
                    }
                }
            }
            oplane[oy * d.OW + ox] = best;
            aplane[oy * d.OW + ox] = best_idx;
        }
    }
}

template <typename T>
inline void maxpool_backward_bc(const PoolDims& d, const T* gout, const int64_t* argmax,
                                T* din, int64_t b, int64_t c) {
    T* dplane = din + ((b * d.C + c) * d.H) * d.W;
    const int64_t base = ((b * d.C + c) * d.H) * d.W;
    const T* gplane = gout + ((b * d.C + c) * d.OH) * d.OW;
    const int64_t* aplane = argmax + ((b * d.C + c) * d.OH) * d.OW;
    for (int64_t iy = 0; iy < d.H; ++iy) {
        const int64_t oy_lo = std::max<int64_t>(0, div_ceil(iy + d.p - d.k + 1, d.s));
        const int64_t oy_hi = std::min(d.OH - 1, div_floor(iy + d.p, d.s));
        for (int64_t ix = 0; ix < d.W; ++ix) {
            const int64_t ox_lo = std::max<int64_t>(0, div_ceil(ix + d.p - d.k + 1, d.s));
            const int64_t ox_hi = std::min(d.OW - 1, div_floor(ix + d.p, d.s));
            const int64_t me = base + iy * d.W + ix;
            T acc = T(0);
            for (int64_t oy = oy_lo; oy <= oy_hi; ++oy)
                for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                    if (aplane[oy * d.OW + ox] == me) acc += gplane[oy * d.OW + ox];
            dplane[iy * d.W + ix] += acc;
        }
    }
}

}  // namespace detail

template <typename T>
void maxpool_forward_serial(const PoolDims& d, const T* in, T* out, int64_t* argmax) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t c = 0; c < d.C; ++c) detail::maxpool_forward_bc(d, in, out, argmax, b, c);
}

template <typename T>
void maxpool_forward_omp(const PoolDims& d, const T* in, T* out, int64_t* argmax) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t c = 0; c < d.C; ++c) detail::maxpool_forward_bc(d, in, out, argmax, b, c);
}

template <typename T>
void maxpool_forward(const PoolDims& d, const T* in, T* out, int64_t* argmax) {
    if (use_parallel(d.B * d.C * d.OH * d.OW * d.k * d.k))
        maxpool_forward_omp(d, in, out, argmax);
    else
        maxpool_forward_serial(d, in, out, argmax);
}

template <typename T>
void maxpool_backward_serial(const PoolDims& d, const T* gout, const int64_t* argmax, T* din) {
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t c = 0; c < d.C; ++c) detail::maxpool_backward_bc(d, gout, argmax, din, b, c);
}

template <typename T>
void maxpool_backward_omp(const PoolDims& d, const T* gout, const int64_t* argmax, T* din) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t c = 0; c < d.C; ++c) detail::maxpool_backward_bc(d, gout, argmax, din, b, c);
}

template <typename T>
void maxpool_backward(const PoolDims& d, const T* gout, const int64_t* argmax, T* din) {
    if (use_parallel(d.B * d.C * d.H * d.W))
        maxpool_backward_omp(d, gout, argmax, din);
    else
        maxpool_backward_serial(d, gout, argmax, din);
}

// ---------------------------------------------------------------------------
// batchnorm2d. Per-channel reductions run serially inside each channel, so
// the result does not depend on the thread count. Statistics accumulate in
// double. Variance is biased (1/N), for both normalization and the running
// estimate.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void bn_train_channel(int64_t B, int64_t C, int64_t H, int64_t W, const T* in,
                             const T* gamma, const T* beta, T eps, T* out, T* save_mean,
                             T* save_inv_std, int64_t c) {
    const int64_t plane = H * W;
    double sum = 0.0, sq = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const T* p = in + ((b * C + c) * H) * W;
        for (int64_t i = 0; i < plane; ++i) {
            const double v = static_cast<double>(p[i]);
            sum += v;
            sq += v * v;
        }
    }
    const double n = static_cast<double>(B * plane);
    const double mean = sum / n;
    const double var = std::max(0.0, sq / n - mean * mean);
    const T m = static_cast<T>(mean);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    save_mean[c] = m;
    save_inv_std[c] = inv;
    const T g = gamma[c], bta = beta[c];
    for (int64_t b = 0; b < B; ++b) {
        const T* p = in + ((b * C + c) * H) * W;
        T* q = out + ((b * C + c) * H) * W;
        for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - m) * inv * g + bta;
    }
}

template <typename T>
inline void bn_train_backward_channel(int64_t B, int64_t C, int64_t H, int64_t W, const T* in,
                                      const T* gamma, const T* save_mean, const T* save_inv_std,
                                      const T* gout, T* din, T* dgamma, T* dbeta, int64_t c) {
    const int64_t plane = H * W;
    const double n = static_cast<double>(B * plane);
    const double m = static_cast<double>(save_mean[c]);
    const double inv = static_cast<double>(save_inv_std[c]);
    double s1 = 0.0, s2 = 0.0;  // sum(g), sum(g * xhat)
    for (int64_t b = 0; b < B; ++b) {
        const T* g = gout + ((b * C + c) * H) * W;
        const T* x = in + ((b * C + c) * H) * W;
        for (int64_t i = 0; i < plane; ++i) {
            const double gi = static_cast<double>(g[i]);
            s1 += gi;
            s2 += gi * (static_cast<double>(x[i]) - m) * inv;
        }
    }
    dbeta[c] += static_cast<T>(s1);
    dgamma[c] += static_cast<T>(s2);
    const double k = static_cast<double>(gamma[c]) * inv;
    for (int64_t b = 0; b < B; ++b) {
        const T* g = gout + ((b * C + c) * H) * W;
        const T* x = in + ((b * C + c) * H) * W;
        T* d = din + ((b * C + c) * H) * W;
        for (int64_t i = 0; i < plane; ++i) {
            const double xhat = (static_cast<double>(x[i]) - m) * inv;
            d[i] += static_cast<T>(k * (static_cast<double>(g[i]) - s1 / n - xhat * s2 / n));
        }
    }
}

}  // namespace detail

template <typename T>
void bn_train_forward_serial(int64_t B, int64_t C, int64_t H, int64_t W, const T* in,
                             const T* gamma, const T* beta, T eps, T* out, T* save_mean,
                             T* save_inv_std) {
    for (int64_t c = 0; c < C; ++c)
        detail::bn_train_channel(B, C, H, W, in, gamma, beta, eps, out, save_mean, save_inv_std, c);
}

template <typename T>
void bn_train_forward_omp(int64_t B, int64_t C, int64_t H, int64_t W, const T* in, const T* gamma,
                          const T* beta, T eps, T* out, T* save_mean, T* save_inv_std) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c)
        detail::bn_train_channel(B, C, H, W, in, gamma, beta, eps, out, save_mean, save_inv_std, c);
}

template <typename T>
void bn_train_forward(int64_t B, int64_t C, int64_t H, int64_t W, const T* in, const T* gamma,
                      const T* beta, T eps, T* out, T* save_mean, T* save_inv_std) {
    if (use_parallel(B * C * H * W) && C > 1)
        bn_train_forward_omp(B, C, H, W, in, gamma, beta, eps, out, save_mean, save_inv_std);
    else
        bn_train_forward_serial(B, C, H, W, in, gamma, beta, eps, out, save_mean, save_inv_std);
}

template <typename T>
void bn_train_backward_serial(int64_t B, int64_t C, int64_t H, int64_t W, const T* in,
                              const T* gamma, const T* save_mean, const T* save_inv_std,
                              const T* gout, T* din, T* dgamma, T* dbeta) {
    for (int64_t c = 0; c < C; ++c)
        detail::bn_train_backward_channel(B, C, H, W, in, gamma, save_mean, save_inv_std, gout,
                                          din, dgamma, dbeta, c);
}

template <typename T>
void bn_train_backward_omp(int64_t B, int64_t C, int64_t H, int64_t W, const T* in, const T* gamma,
                           const T* save_mean, const T* save_inv_std, const T* gout, T* din,
                           T* dgamma, T* dbeta) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c)
        detail::bn_train_backward_channel(B, C, H, W, in, gamma, save_mean, save_inv_std, gout,
                                          din, dgamma, dbeta, c);
}

template <typename T>
void bn_train_backward(int64_t B, int64_t C, int64_t H, int64_t W, const T* in, const T* gamma,
                       const T* save_mean, const T* save_inv_std, const T* gout, T* din,
                       T* dgamma, T* dbeta) {
    if (use_parallel(B * C * H * W) && C > 1)
        bn_train_backward_omp(B, C, H, W, in, gamma, save_mean, save_inv_std, gout, din, dgamma, dbeta);
    else
        bn_train_backward_serial(B, C, H, W, in, gamma, save_mean, save_inv_std, gout, din, dgamma, dbeta);
}

}  // namespace dualseg::kernels
