#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>

#include "iomm/linalg.hpp"
#include "iomm/rng.hpp"
#include "iomm/tensor.hpp"

// Dense NN primitives with explicit hand-written backward passes. All buffers
// are row-major; backward functions ACCUMULATE into parameter gradients and
// (where noted) into input gradients, so callers zero them once per step.

namespace iomm {

template <typename T>
struct Param {
    Tensor<T> w;
    Tensor<T> g;

    Param() = default;
    explicit Param(std::vector<int64_t> shape) : w(shape), g(std::move(shape)) {}

    void zero_grad() { g.zero(); }
};

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * stddev);
}

// ---------------------------------------------------------------------------
// Linear: y[n,out] = x[n,in] . w[out,in]^T + b

template <typename T>
void linear_forward(const T* x, int64_t n, int64_t in, const Param<T>& w,
                    const Param<std::type_identity_t<T>>* b, T* y) {
    const int64_t out = w.w.shape[0];
    gemm(false, true, n, out, in, T(1), x, in, w.w.data(), in, T(0), y, out);
    if (b) {
        for (int64_t i = 0; i < n; ++i) {
            T* row = y + i * out;
            for (int64_t j = 0; j < out; ++j) row[j] += b->w[j];
        }
    }
}

// dx may be null when the input is a leaf; accum_wgrad=false skips parameter
// gradients (frozen weights).
template <typename T>
void linear_backward(const T* x, const T* dy, int64_t n, int64_t in, Param<T>& w,
                     Param<std::type_identity_t<T>>* b,
                     std::type_identity_t<T>* dx, bool accum_wgrad = true,
                     bool accum_dx = true) {
    const int64_t out = w.w.shape[0];
    if (dx) {
        gemm(false, false, n, in, out, T(1), dy, out, w.w.data(), in,
             accum_dx ? T(1) : T(0), dx, in);
    }
    if (accum_wgrad) {
        gemm(true, false, out, in, n, T(1), dy, out, x, in, T(1), w.g.data(), in);
        if (b) {
            for (int64_t i = 0; i < n; ++i) {
                const T* row = dy + i * out;
                for (int64_t j = 0; j < out; ++j) b->g[j] += row[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm over the last axis; gamma/beta may be null (no affine).

constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;  // [n, d]
    Tensor<T> rstd;  // [n]
};

template <typename T>
void layernorm_forward(const T* x, int64_t n, int64_t d, const T* gamma,
                       const T* beta, T* y, LayerNormCache<T>& cache) {
    cache.xhat = Tensor<T>({n, d});
    cache.rstd = Tensor<T>({n});
    for (int64_t i = 0; i < n; ++i) {
        const T* xi = x + i * d;
        T mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += xi[j];
        mean /= T(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T s = xi[j] - mean;
            var += s * s;
        }
        var /= T(d);
        const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
        cache.rstd[i] = rstd;
        T* xh = cache.xhat.data() + i * d;
        T* yi = y + i * d;
        for (int64_t j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * rstd;
            yi[j] = gamma ? xh[j] * gamma[j] + beta[j] : xh[j];
        }
    }
}

template <typename T>
void layernorm_backward(const LayerNormCache<T>& cache, const T* dy, int64_t n,
                        int64_t d, const T* gamma, T* dx,
                        std::type_identity_t<T>* dgamma,
                        std::type_identity_t<T>* dbeta) {
    for (int64_t i = 0; i < n; ++i) {
        const T* dyi = dy + i * d;
        const T* xh = cache.xhat.data() + i * d;
        const T rstd = cache.rstd[i];
        T mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T dxhat = gamma ? dyi[j] * gamma[j] : dyi[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[j];
        }
        mean_dxhat /= T(d);
        mean_dxhat_xhat /= T(d);
        T* dxi = dx + i * d;
        for (int64_t j = 0; j < d; ++j) {
            const T dxhat = gamma ? dyi[j] * gamma[j] : dyi[j];
            dxi[j] += rstd * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
            if (dgamma) dgamma[j] += dyi[j] * xh[j];
            if (dbeta) dbeta[j] += dyi[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Row softmax

template <typename T>
void softmax_rows(T* x, int64_t n, int64_t d) {
    for (int64_t i = 0; i < n; ++i) {
        T* row = x + i * d;
        T mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < d; ++j) row[j] *= inv;
    }
}

// dx = y * (dy - sum(dy * y)) per row; in-place on dy is allowed via dx==dy.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, int64_t n, int64_t d, T* dx) {
    for (int64_t i = 0; i < n; ++i) {
        const T* yi = y + i * d;
        const T* dyi = dy + i * d;
        T dot = 0;
        for (int64_t j = 0; j < d; ++j) dot += dyi[j] * yi[j];
        T* dxi = dx + i * d;
        for (int64_t j = 0; j < d; ++j) dxi[j] = yi[j] * (dyi[j] - dot);
    }
}

// ---------------------------------------------------------------------------
// Multi-head scaled-dot-product attention. q:[tq,d] k,v:[tk,d], d % heads == 0.

template <typename T>
struct AttentionCache {
    Tensor<T> probs;  // [heads, tq, tk]
    int64_t tq = 0, tk = 0, heads = 0, d = 0;
};

template <typename T>
void attention_forward(const T* q, const T* k, const T* v, int64_t tq, int64_t tk,
                       int64_t d, int64_t heads, T* out, AttentionCache<T>& cache) {
    const int64_t hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    cache.probs = Tensor<T>({heads, tq, tk});
    cache.tq = tq;
    cache.tk = tk;
    cache.heads = heads;
    cache.d = d;
    for (int64_t h = 0; h < heads; ++h) {
        T* probs = cache.probs.data() + h * tq * tk;
        gemm(false, true, tq, tk, hd, scale, q + h * hd, d, k + h * hd, d, T(0),
             probs, tk);
        softmax_rows(probs, tq, tk);
        gemm(false, false, tq, hd, tk, T(1), probs, tk, v + h * hd, d, T(0),
             out + h * hd, d);
    }
}

// Accumulates into dq, dk, dv (any may be null).
template <typename T>
void attention_backward(const AttentionCache<T>& cache, const T* q, const T* k,
                        const T* v, const T* dout, T* dq, T* dk, T* dv) {
    const int64_t tq = cache.tq, tk = cache.tk, heads = cache.heads, d = cache.d;
    const int64_t hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    Tensor<T> dprobs({tq, tk});
    Tensor<T> dscores({tq, tk});
    for (int64_t h = 0; h < heads; ++h) {
        const T* probs = cache.probs.data() + h * tq * tk;
        gemm(false, true, tq, tk, hd, T(1), dout + h * hd, d, v + h * hd, d, T(0),
             dprobs.data(), tk);
        if (dv) {
            gemm(true, false, tk, hd, tq, T(1), probs, tk, dout + h * hd, d, T(1),
                 dv + h * hd, d);
        }
        softmax_rows_backward(probs, dprobs.data(), tq, tk, dscores.data());
        if (dq) {
            gemm(false, false, tq, hd, tk, scale, dscores.data(), tk, k + h * hd, d,
                 T(1), dq + h * hd, d);
        }
        if (dk) {
            gemm(true, false, tk, hd, tq, scale, dscores.data(), tk, q + h * hd, d,
                 T(1), dk + h * hd, d);
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

template <typename T>
inline T silu(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
inline T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
bool all_finite(const T* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(x[i]))) return false;
    }
    return true;
}

}  // namespace iomm
