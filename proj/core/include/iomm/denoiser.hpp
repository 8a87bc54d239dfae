#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iomm/errors.hpp"
#include "iomm/nn.hpp"
#include "iomm/tensor.hpp"

// Velocity network F(x_t, t, h): a transformer over noisy-image patch tokens.
// Image tokens attend jointly over themselves and the projected condition
// tokens (the condition is read-only keys/values); time enters through
// per-block adaptive scale/shift/gate modulation. The output projection is
// zero-initialized, so a fresh denoiser is identically zero.

namespace iomm {

struct DenoiserConfig {
    int64_t blocks = 4;
    int64_t width = 128;
    int64_t heads = 4;
    int64_t patch = 4;
    int64_t resolution = 32;
    int64_t time_dim = 64;  // sinusoidal feature width, even
    int64_t mlp_mult = 4;
    int64_t cond_dim = 64;  // width of the latent condition h
    double omega_max = 1000.0;
    uint64_t init_seed = 0;

    int64_t patch_dim() const { return patch * patch * 3; }
    int64_t tokens() const {
        const int64_t side = resolution / patch;
        return side * side;
    }

    void validate() const {
        if (blocks < 1 || width < 1 || heads < 1 || time_dim < 2 || cond_dim < 1)
            throw ConfigError("denoiser dims must be positive");
        if (width % heads != 0) throw ConfigError("denoiser width % heads != 0");
        if (time_dim % 2 != 0) throw ConfigError("denoiser time_dim must be even");
        if (patch < 1 || resolution % patch != 0)
            throw ConfigError("denoiser resolution not divisible by patch size");
    }
};

// Sinusoidal features: feature 2k = sin(t w_k), 2k+1 = cos(t w_k), w_k
// geometric from 1 to omega_max.
template <typename T>
Tensor<T> time_embed(T t, int64_t dim, double omega_max) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("time_embed dim must be even");
    Tensor<T> out({dim});
    const int64_t pairs = dim / 2;
    for (int64_t k = 0; k < pairs; ++k) {
        const double w =
            pairs == 1 ? 1.0 : std::pow(omega_max, double(k) / double(pairs - 1));
        out[size_t(2 * k)] = std::sin(t * T(w));
        out[size_t(2 * k + 1)] = std::cos(t * T(w));
    }
    return out;
}

template <typename T>
struct DenoiserBlock {
    Param<T> wq, wk, wv, wo;  // [W, W]
    Param<T> w1, b1, w2, b2;  // MLP
    Param<T> mod_w, mod_b;    // [6W, W]: shift1 scale1 gate1 shift2 scale2 gate2
};

template <typename T>
struct Denoiser {
    DenoiserConfig cfg;
    Param<T> in_w, in_b;      // [W, pd], [W]
    Param<T> pos;             // [tokens, W]
    Param<T> cond_w, cond_b;  // [W, cond_dim], [W]
    Param<T> t_w1, t_b1, t_w2, t_b2;  // time MLP
    std::vector<DenoiserBlock<T>> blocks;
    Param<T> modf_w, modf_b;  // [2W, W]: shift_f scale_f
    Param<T> out_w, out_b;    // [pd, W], [pd]; zero-initialized

    template <class F>
    void for_each_param(F&& f) {
        f("denoiser.in_w", in_w); f("denoiser.in_b", in_b);
        f("denoiser.pos", pos);
        f("denoiser.cond_w", cond_w); f("denoiser.cond_b", cond_b);
        f("denoiser.t_w1", t_w1); f("denoiser.t_b1", t_b1);
        f("denoiser.t_w2", t_w2); f("denoiser.t_b2", t_b2);
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "denoiser.block" + std::to_string(i) + ".";
            auto& b = blocks[i];
            f(p + "wq", b.wq); f(p + "wk", b.wk); f(p + "wv", b.wv); f(p + "wo", b.wo);
            f(p + "w1", b.w1); f(p + "b1", b.b1); f(p + "w2", b.w2); f(p + "b2", b.b2);
            f(p + "mod_w", b.mod_w); f(p + "mod_b", b.mod_b);
        }
        f("denoiser.modf_w", modf_w); f("denoiser.modf_b", modf_b);
        f("denoiser.out_w", out_w); f("denoiser.out_b", out_b);
    }

    int64_t param_count() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Param<T>& p) { n += p.w.numel(); });
        return n;
    }

    void zero_grads() {
        for_each_param([](const std::string&, Param<T>& p) { p.zero_grad(); });
    }
};

template <typename T>
Denoiser<T> make_denoiser(const DenoiserConfig& cfg) {
    cfg.validate();
    Denoiser<T> dn;
    dn.cfg = cfg;
    Rng rng(derive_seed(cfg.init_seed, 0xd40153ull));
    const int64_t w = cfg.width;
    const int64_t pd = cfg.patch_dim();
    const int64_t hidden = cfg.mlp_mult * w;
    const double w_std = 1.0 / std::sqrt(double(w));

    dn.in_w = Param<T>({w, pd});
    fill_normal(dn.in_w.w, rng, 1.0 / std::sqrt(double(pd)));
    dn.in_b = Param<T>({w});
    dn.pos = Param<T>({cfg.tokens(), w});
    fill_normal(dn.pos.w, rng, 0.5);
    dn.cond_w = Param<T>({w, cfg.cond_dim});
    fill_normal(dn.cond_w.w, rng, 1.0 / std::sqrt(double(cfg.cond_dim)));
    dn.cond_b = Param<T>({w});
    dn.t_w1 = Param<T>({w, cfg.time_dim});
    fill_normal(dn.t_w1.w, rng, 1.0 / std::sqrt(double(cfg.time_dim)));
    dn.t_b1 = Param<T>({w});
    dn.t_w2 = Param<T>({w, w});
    fill_normal(dn.t_w2.w, rng, w_std);
    dn.t_b2 = Param<T>({w});

    dn.blocks.resize(size_t(cfg.blocks));
    for (auto& b : dn.blocks) {
        b.wq = Param<T>({w, w}); fill_normal(b.wq.w, rng, w_std);
        b.wk = Param<T>({w, w}); fill_normal(b.wk.w, rng, w_std);
        b.wv = Param<T>({w, w}); fill_normal(b.wv.w, rng, w_std);
        b.wo = Param<T>({w, w}); fill_normal(b.wo.w, rng, w_std);
        b.w1 = Param<T>({hidden, w}); fill_normal(b.w1.w, rng, w_std);
        b.b1 = Param<T>({hidden});
        b.w2 = Param<T>({w, hidden});
        fill_normal(b.w2.w, rng, 1.0 / std::sqrt(double(hidden)));
        b.b2 = Param<T>({w});
        b.mod_w = Param<T>({6 * w, w});
        fill_normal(b.mod_w.w, rng, 0.02);
        b.mod_b = Param<T>({6 * w});
        // Gates start at 1, shifts/scales at 0.
        for (int64_t j = 2 * w; j < 3 * w; ++j) b.mod_b.w[size_t(j)] = T(1);
        for (int64_t j = 5 * w; j < 6 * w; ++j) b.mod_b.w[size_t(j)] = T(1);
    }
    dn.modf_w = Param<T>({2 * w, w});
    fill_normal(dn.modf_w.w, rng, 0.02);
    dn.modf_b = Param<T>({2 * w});
    dn.out_w = Param<T>({pd, w});  // stays zero
    dn.out_b = Param<T>({pd});
    return dn;
}

// --------------------------------------------------------------------------
// Forward / backward caches

template <typename T>
struct DenoiserBlockCache {
    Tensor<T> x_in;
    LayerNormCache<T> ln1, ln2;
    Tensor<T> a, amod;       // [N, W]
    Tensor<T> kv;            // [N+S, W] modulated image tokens ++ condp
    Tensor<T> q, k, v;       // q: [N, W]; k, v: [N+S, W]
    AttentionCache<T> att;
    Tensor<T> att_out;       // pre-wo
    Tensor<T> o;             // post-wo
    Tensor<T> x_mid;
    Tensor<T> b, bmod;
    Tensor<T> h1_pre, h1;
    Tensor<T> ffn;           // post-w2 (incl. bias)
    Tensor<T> mod;           // [6W]
};

template <typename T>
struct DenoiserCache {
    Tensor<T> temb;          // [time_dim]
    Tensor<T> t_h_pre, t_h;  // time MLP hidden
    Tensor<T> tvec;          // [W]
    Tensor<T> sm;            // silu(tvec)
    Tensor<T> h;             // [S, cond_dim] input condition
    Tensor<T> condp;         // [S, W]
    Tensor<T> xflat;         // [N, pd] patchified input
    Tensor<T> xtok;          // [N, W]
    std::vector<DenoiserBlockCache<T>> blocks;
    LayerNormCache<T> lnf;
    Tensor<T> f, fmod;       // final LN out, modulated
    Tensor<T> modf;          // [2W]
    int64_t s = 0;
};

namespace detail {

// y[i, j] = x[i, j] * (1 + scale[j]) + shift[j]
template <typename T>
void modulate(const T* x, int64_t n, int64_t w, const T* shift, const T* scale, T* y) {
    for (int64_t i = 0; i < n; ++i) {
        const T* xi = x + i * w;
        T* yi = y + i * w;
        for (int64_t j = 0; j < w; ++j) yi[j] = xi[j] * (T(1) + scale[j]) + shift[j];
    }
}

// Backward of modulate: accumulates dshift, dscale; writes dx.
template <typename T>
void modulate_backward(const T* x, const T* dy, int64_t n, int64_t w, const T* scale,
                       T* dx, T* dshift, T* dscale) {
    for (int64_t i = 0; i < n; ++i) {
        const T* xi = x + i * w;
        const T* dyi = dy + i * w;
        T* dxi = dx + i * w;
        for (int64_t j = 0; j < w; ++j) {
            dxi[j] = dyi[j] * (T(1) + scale[j]);
            dshift[j] += dyi[j];
            dscale[j] += dyi[j] * xi[j];
        }
    }
}

}  // namespace detail

// Single-element forward: x_t [res, res, 3], scalar t, condition h [S, cond_dim].
// Returns the predicted velocity with the shape of x_t.
template <typename T>
Tensor<T> denoiser_forward(Denoiser<T>& dn, const Tensor<T>& x_t, T t,
                           const Tensor<T>& h, DenoiserCache<T>& cache) {
    const auto& cfg = dn.cfg;
    const int64_t res = cfg.resolution;
    if (x_t.shape != std::vector<int64_t>({res, res, 3})) {
        throw ShapeError("denoiser: x_t shape " + x_t.shape_str() +
                         " does not match configured resolution");
    }
    if (h.shape.size() != 2 || h.shape[1] != cfg.cond_dim)
        throw ShapeError("denoiser: condition width mismatch");
    const int64_t n = cfg.tokens();
    const int64_t pd = cfg.patch_dim();
    const int64_t w = cfg.width;
    const int64_t s = h.shape[0];
    const int64_t side = res / cfg.patch;
    cache.s = s;

    // Time pathway.
    cache.temb = time_embed(t, cfg.time_dim, cfg.omega_max);
    cache.t_h_pre = Tensor<T>({1, w});
    linear_forward(cache.temb.data(), 1, cfg.time_dim, dn.t_w1, &dn.t_b1,
                   cache.t_h_pre.data());
    cache.t_h = cache.t_h_pre;
    for (auto& v : cache.t_h.v) v = silu(v);
    cache.tvec = Tensor<T>({1, w});
    linear_forward(cache.t_h.data(), 1, w, dn.t_w2, &dn.t_b2, cache.tvec.data());
    cache.sm = cache.tvec;
    for (auto& v : cache.sm.v) v = silu(v);

    // Condition projection (shared by all blocks).
    cache.h = h;
    cache.condp = Tensor<T>({s, w});
    linear_forward(h.data(), s, cfg.cond_dim, dn.cond_w, &dn.cond_b, cache.condp.data());

    // Patchify.
    cache.xflat = Tensor<T>({n, pd});
    for (int64_t py = 0; py < side; ++py) {
        for (int64_t px = 0; px < side; ++px) {
            T* dst = cache.xflat.data() + (py * side + px) * pd;
            for (int64_t y = 0; y < cfg.patch; ++y) {
                for (int64_t x = 0; x < cfg.patch; ++x) {
                    const T* src =
                        x_t.data() + ((py * cfg.patch + y) * res + px * cfg.patch + x) * 3;
                    *dst++ = src[0];
                    *dst++ = src[1];
                    *dst++ = src[2];
                }
            }
        }
    }
    cache.xtok = Tensor<T>({n, w});
    linear_forward(cache.xflat.data(), n, pd, dn.in_w, &dn.in_b, cache.xtok.data());
    for (int64_t i = 0; i < n * w; ++i) cache.xtok[size_t(i)] += dn.pos.w[size_t(i)];

    Tensor<T> x = cache.xtok;
    cache.blocks.clear();
    cache.blocks.resize(dn.blocks.size());
    for (size_t bi = 0; bi < dn.blocks.size(); ++bi) {
        auto& blk = dn.blocks[bi];
        auto& bc = cache.blocks[bi];
        bc.x_in = x;

        bc.mod = Tensor<T>({1, 6 * w});
        linear_forward(cache.sm.data(), 1, w, blk.mod_w, &blk.mod_b, bc.mod.data());
        const T* shift1 = bc.mod.data();
        const T* scale1 = bc.mod.data() + w;
        const T* gate1 = bc.mod.data() + 2 * w;
        const T* shift2 = bc.mod.data() + 3 * w;
        const T* scale2 = bc.mod.data() + 4 * w;
        const T* gate2 = bc.mod.data() + 5 * w;

        bc.a = Tensor<T>({n, w});
        layernorm_forward(x.data(), n, w, (const T*)nullptr, (const T*)nullptr,
                          bc.a.data(), bc.ln1);
        bc.amod = Tensor<T>({n, w});
        detail::modulate(bc.a.data(), n, w, shift1, scale1, bc.amod.data());

        bc.kv = Tensor<T>({n + s, w});
        std::copy_n(bc.amod.data(), n * w, bc.kv.data());
        std::copy_n(cache.condp.data(), s * w, bc.kv.data() + n * w);

        bc.q = Tensor<T>({n, w});
        linear_forward(bc.amod.data(), n, w, blk.wq, nullptr, bc.q.data());
        bc.k = Tensor<T>({n + s, w});
        linear_forward(bc.kv.data(), n + s, w, blk.wk, nullptr, bc.k.data());
        bc.v = Tensor<T>({n + s, w});
        linear_forward(bc.kv.data(), n + s, w, blk.wv, nullptr, bc.v.data());

        bc.att_out = Tensor<T>({n, w});
        attention_forward(bc.q.data(), bc.k.data(), bc.v.data(), n, n + s, w,
                          cfg.heads, bc.att_out.data(), bc.att);
        bc.o = Tensor<T>({n, w});
        linear_forward(bc.att_out.data(), n, w, blk.wo, nullptr, bc.o.data());
        for (int64_t i = 0; i < n; ++i) {
            T* row = x.data() + i * w;
            const T* orow = bc.o.data() + i * w;
            for (int64_t j = 0; j < w; ++j) row[j] += gate1[j] * orow[j];
        }
        bc.x_mid = x;

        bc.b = Tensor<T>({n, w});
        layernorm_forward(x.data(), n, w, (const T*)nullptr, (const T*)nullptr,
                          bc.b.data(), bc.ln2);
        bc.bmod = Tensor<T>({n, w});
        detail::modulate(bc.b.data(), n, w, shift2, scale2, bc.bmod.data());
        const int64_t hidden = cfg.mlp_mult * w;
        bc.h1_pre = Tensor<T>({n, hidden});
        linear_forward(bc.bmod.data(), n, w, blk.w1, &blk.b1, bc.h1_pre.data());
        bc.h1 = bc.h1_pre;
        for (auto& v : bc.h1.v) v = gelu(v);
        bc.ffn = Tensor<T>({n, w});
        linear_forward(bc.h1.data(), n, hidden, blk.w2, &blk.b2, bc.ffn.data());
        for (int64_t i = 0; i < n; ++i) {
            T* row = x.data() + i * w;
            const T* frow = bc.ffn.data() + i * w;
            for (int64_t j = 0; j < w; ++j) row[j] += gate2[j] * frow[j];
        }
        if (!all_finite(x.data(), x.numel())) {
            throw NumericError("denoiser: non-finite activations after block " +
                               std::to_string(bi));
        }
    }

    cache.modf = Tensor<T>({1, 2 * w});
    linear_forward(cache.sm.data(), 1, w, dn.modf_w, &dn.modf_b, cache.modf.data());
    cache.f = Tensor<T>({n, w});
    layernorm_forward(x.data(), n, w, (const T*)nullptr, (const T*)nullptr,
                      cache.f.data(), cache.lnf);
    cache.fmod = Tensor<T>({n, w});
    detail::modulate(cache.f.data(), n, w, cache.modf.data(), cache.modf.data() + w,
                     cache.fmod.data());

    Tensor<T> y({n, pd});
    linear_forward(cache.fmod.data(), n, w, dn.out_w, &dn.out_b, y.data());

    // Un-patchify.
    Tensor<T> out({res, res, 3});
    for (int64_t py = 0; py < side; ++py) {
        for (int64_t px = 0; px < side; ++px) {
            const T* src = y.data() + (py * side + px) * pd;
            for (int64_t yy = 0; yy < cfg.patch; ++yy) {
                for (int64_t xx = 0; xx < cfg.patch; ++xx) {
                    T* dst =
                        out.data() + ((py * cfg.patch + yy) * res + px * cfg.patch + xx) * 3;
                    dst[0] = *src++;
                    dst[1] = *src++;
                    dst[2] = *src++;
                }
            }
        }
    }
    return out;
}

// Backward from d(velocity); accumulates parameter grads, returns d(h).
template <typename T>
Tensor<T> denoiser_backward(Denoiser<T>& dn, const DenoiserCache<T>& cache,
                            const Tensor<T>& dvel) {
    const auto& cfg = dn.cfg;
    const int64_t res = cfg.resolution;
    const int64_t n = cfg.tokens();
    const int64_t pd = cfg.patch_dim();
    const int64_t w = cfg.width;
    const int64_t s = cache.s;
    const int64_t side = res / cfg.patch;
    const int64_t hidden = cfg.mlp_mult * w;

    // Re-patchify the output gradient.
    Tensor<T> dy({n, pd});
    for (int64_t py = 0; py < side; ++py) {
        for (int64_t px = 0; px < side; ++px) {
            T* dst = dy.data() + (py * side + px) * pd;
            for (int64_t yy = 0; yy < cfg.patch; ++yy) {
                for (int64_t xx = 0; xx < cfg.patch; ++xx) {
                    const T* src =
                        dvel.data() + ((py * cfg.patch + yy) * res + px * cfg.patch + xx) * 3;
                    *dst++ = src[0];
                    *dst++ = src[1];
                    *dst++ = src[2];
                }
            }
        }
    }

    Tensor<T> dsm({1, w});  // accumulated across all modulation consumers

    Tensor<T> dfmod({n, w});
    linear_backward(cache.fmod.data(), dy.data(), n, w, dn.out_w, &dn.out_b,
                    dfmod.data(), true, false);
    Tensor<T> df({n, w});
    Tensor<T> dmodf({1, 2 * w});
    detail::modulate_backward(cache.f.data(), dfmod.data(), n, w,
                              cache.modf.data() + w, df.data(), dmodf.data(),
                              dmodf.data() + w);
    linear_backward(cache.sm.data(), dmodf.data(), 1, w, dn.modf_w, &dn.modf_b,
                    dsm.data(), true, true);

    Tensor<T> dx({n, w});
    layernorm_backward(cache.lnf, df.data(), n, w, (const T*)nullptr, dx.data(),
                       nullptr, nullptr);

    Tensor<T> dcondp({s, w});  // accumulated across blocks

    for (int64_t bi = int64_t(dn.blocks.size()) - 1; bi >= 0; --bi) {
        auto& blk = dn.blocks[size_t(bi)];
        const auto& bc = cache.blocks[size_t(bi)];
        const T* gate1 = bc.mod.data() + 2 * w;
        const T* scale1 = bc.mod.data() + w;
        const T* gate2 = bc.mod.data() + 5 * w;
        const T* scale2 = bc.mod.data() + 4 * w;
        Tensor<T> dmod({1, 6 * w});

        // x = x_mid + gate2 * ffn
        Tensor<T> dffn({n, w});
        for (int64_t i = 0; i < n; ++i) {
            const T* dxi = dx.data() + i * w;
            const T* frow = bc.ffn.data() + i * w;
            T* drow = dffn.data() + i * w;
            T* dgate2 = dmod.data() + 5 * w;
            for (int64_t j = 0; j < w; ++j) {
                drow[j] = dxi[j] * gate2[j];
                dgate2[j] += dxi[j] * frow[j];
            }
        }
        Tensor<T> dh1({n, hidden});
        linear_backward(bc.h1.data(), dffn.data(), n, hidden, blk.w2, &blk.b2,
                        dh1.data(), true, false);
        for (size_t i = 0; i < dh1.v.size(); ++i) dh1[i] *= gelu_grad(bc.h1_pre[i]);
        Tensor<T> dbmod({n, w});
        linear_backward(bc.bmod.data(), dh1.data(), n, w, blk.w1, &blk.b1,
                        dbmod.data(), true, false);
        Tensor<T> db({n, w});
        detail::modulate_backward(bc.b.data(), dbmod.data(), n, w, scale2, db.data(),
                                  dmod.data() + 3 * w, dmod.data() + 4 * w);
        layernorm_backward(bc.ln2, db.data(), n, w, (const T*)nullptr, dx.data(),
                           nullptr, nullptr);

        // x_mid = x_in + gate1 * o
        Tensor<T> do_({n, w});
        for (int64_t i = 0; i < n; ++i) {
            const T* dxi = dx.data() + i * w;
            const T* orow = bc.o.data() + i * w;
            T* drow = do_.data() + i * w;
            T* dgate1 = dmod.data() + 2 * w;
            for (int64_t j = 0; j < w; ++j) {
                drow[j] = dxi[j] * gate1[j];
                dgate1[j] += dxi[j] * orow[j];
            }
        }
        Tensor<T> datt_out({n, w});
        linear_backward(bc.att_out.data(), do_.data(), n, w, blk.wo, nullptr,
                        datt_out.data(), true, false);
        Tensor<T> dq({n, w}), dk({n + s, w}), dv({n + s, w});
        attention_backward(bc.att, bc.q.data(), bc.k.data(), bc.v.data(),
                           datt_out.data(), dq.data(), dk.data(), dv.data());

        Tensor<T> dkv({n + s, w});
        linear_backward(bc.kv.data(), dk.data(), n + s, w, blk.wk, nullptr,
                        dkv.data(), true, false);
        linear_backward(bc.kv.data(), dv.data(), n + s, w, blk.wv, nullptr,
                        dkv.data(), true, true);
        Tensor<T> damod({n, w});
        linear_backward(bc.amod.data(), dq.data(), n, w, blk.wq, nullptr,
                        damod.data(), true, false);
        for (int64_t i = 0; i < n * w; ++i) damod[size_t(i)] += dkv[size_t(i)];
        for (int64_t i = 0; i < s * w; ++i)
            dcondp[size_t(i)] += dkv[size_t(n * w + i)];

        Tensor<T> da({n, w});
        detail::modulate_backward(bc.a.data(), damod.data(), n, w, scale1, da.data(),
                                  dmod.data(), dmod.data() + w);
        layernorm_backward(bc.ln1, da.data(), n, w, (const T*)nullptr, dx.data(),
                           nullptr, nullptr);

        linear_backward(cache.sm.data(), dmod.data(), 1, w, blk.mod_w, &blk.mod_b,
                        dsm.data(), true, true);
    }

    // Input projection path (x_t itself is a leaf; no image grads needed).
    linear_backward(cache.xflat.data(), dx.data(), n, pd, dn.in_w, &dn.in_b,
                    (T*)nullptr, true, false);
    for (int64_t i = 0; i < n * w; ++i) dn.pos.g[size_t(i)] += dx[size_t(i)];

    // Condition projection path.
    Tensor<T> dh_out({s, cfg.cond_dim});
    linear_backward(cache.h.data(), dcondp.data(), s, cfg.cond_dim, dn.cond_w,
                    &dn.cond_b, dh_out.data(), true, false);

    // Time pathway: dsm -> tvec -> MLP.
    Tensor<T> dtvec({1, w});
    for (int64_t j = 0; j < w; ++j)
        dtvec[size_t(j)] = dsm[size_t(j)] * silu_grad(cache.tvec[size_t(j)]);
    Tensor<T> dth({1, w});
    linear_backward(cache.t_h.data(), dtvec.data(), 1, w, dn.t_w2, &dn.t_b2,
                    dth.data(), true, false);
    for (int64_t j = 0; j < w; ++j)
        dth[size_t(j)] *= silu_grad(cache.t_h_pre[size_t(j)]);
    linear_backward(cache.temb.data(), dth.data(), 1, cfg.time_dim, dn.t_w1, &dn.t_b1,
                    (T*)nullptr, true, false);

    return dh_out;
}

}  // namespace iomm
