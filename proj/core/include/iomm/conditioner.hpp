#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "iomm/errors.hpp"
#include "iomm/nn.hpp"
#include "iomm/sha256.hpp"
#include "iomm/shapeworld.hpp"
#include "iomm/tensor.hpp"

// Conditioning stream: a frozen patch encoder and transformer encoder stand in
// for the understanding backbone; a trainable residual query adapter appends K
// learned-query outputs to the condition before the frozen encoder runs.
//
// Sequence layout is always [aux | image and/or caption | query]; masked patch
// rows are zeroed in full.

namespace iomm {

struct BackboneConfig {
    int64_t layers = 2;
    int64_t width = 64;  // D
    int64_t heads = 4;
    int64_t ffn_mult = 4;
    int64_t aux_tokens = 4;  // T
    int64_t patch = 4;
    int64_t resolution = 32;
    uint64_t init_seed = 0;

    int64_t patch_dim() const { return patch * patch * 3; }
    int64_t patch_tokens() const {
        const int64_t side = resolution / patch;
        return side * side;
    }
    int64_t max_seq(int64_t adapter_queries) const {
        return aux_tokens + patch_tokens() + shapeworld::kMaxCaptionLen + adapter_queries;
    }

    void validate() const {
        if (layers < 1 || width < 1 || heads < 1 || aux_tokens < 1)
            throw ConfigError("backbone dims must be positive");
        if (width % heads != 0) throw ConfigError("backbone width % heads != 0");
        if (patch < 1 || resolution % patch != 0)
            throw ConfigError("backbone resolution not divisible by patch size");
    }
};

template <typename T>
struct EncoderLayer {
    Tensor<T> wq, wk, wv, wo;      // [D, D]
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;  // [D]
    Tensor<T> w1, b1;              // [F, D], [F]
    Tensor<T> w2, b2;              // [D, F], [D]
};

// All parameters frozen; reconstructible from init_seed + config.
template <typename T>
struct FrozenBackbone {
    BackboneConfig cfg;
    int64_t pos_rows = 0;
    Tensor<T> patch_w;        // [D, patch*patch*3]
    Tensor<T> patch_b;        // [D]
    Tensor<T> aux;            // [T, D]
    Tensor<T> caption_table;  // [V, D]
    Tensor<T> pos;            // [pos_rows, D]
    std::vector<EncoderLayer<T>> layers;
    Tensor<T> lnf_g, lnf_b;

    template <class F>
    void for_each_tensor(F&& f) const {
        f("backbone.patch_w", patch_w);
        f("backbone.patch_b", patch_b);
        f("backbone.aux", aux);
        f("backbone.caption_table", caption_table);
        f("backbone.pos", pos);
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "backbone.layer" + std::to_string(i) + ".";
            const auto& l = layers[i];
            f(p + "wq", l.wq); f(p + "wk", l.wk); f(p + "wv", l.wv); f(p + "wo", l.wo);
            f(p + "ln1_g", l.ln1_g); f(p + "ln1_b", l.ln1_b);
            f(p + "ln2_g", l.ln2_g); f(p + "ln2_b", l.ln2_b);
            f(p + "w1", l.w1); f(p + "b1", l.b1); f(p + "w2", l.w2); f(p + "b2", l.b2);
        }
        f("backbone.lnf_g", lnf_g);
        f("backbone.lnf_b", lnf_b);
    }

    // SHA-256 over all parameter bytes (little-endian scalar layout), in
    // for_each_tensor order. Must be invariant under training.
    std::string digest() const {
        Sha256 h;
        for_each_tensor([&](const std::string&, const Tensor<T>& t) {
            h.update(t.data(), t.v.size() * sizeof(T));
        });
        const auto d = h.finish();
        static const char* hex = "0123456789abcdef";
        std::string out(64, '0');
        for (int i = 0; i < 32; ++i) {
            out[size_t(2 * i)] = hex[d[size_t(i)] >> 4];
            out[size_t(2 * i + 1)] = hex[d[size_t(i)] & 0xf];
        }
        return out;
    }
};

template <typename T>
FrozenBackbone<T> make_backbone(const BackboneConfig& cfg, int64_t adapter_queries) {
    cfg.validate();
    FrozenBackbone<T> bb;
    bb.cfg = cfg;
    bb.pos_rows = cfg.max_seq(adapter_queries);
    Rng rng(derive_seed(cfg.init_seed, 0xbac0bac0ull));
    const int64_t d = cfg.width;
    const int64_t f = cfg.ffn_mult * d;
    const double w_std = 1.0 / std::sqrt(double(d));

    bb.patch_w = Tensor<T>({d, cfg.patch_dim()});
    fill_normal(bb.patch_w, rng, 1.0 / std::sqrt(double(cfg.patch_dim())));
    bb.patch_b = Tensor<T>({d});
    bb.aux = Tensor<T>({cfg.aux_tokens, d});
    fill_normal(bb.aux, rng, 1.0);
    bb.caption_table = Tensor<T>({shapeworld::kVocabSize, d});
    fill_normal(bb.caption_table, rng, 1.0);
    bb.pos = Tensor<T>({bb.pos_rows, d});
    fill_normal(bb.pos, rng, 0.5);

    bb.layers.resize(size_t(cfg.layers));
    for (auto& l : bb.layers) {
        l.wq = Tensor<T>({d, d}); fill_normal(l.wq, rng, w_std);
        l.wk = Tensor<T>({d, d}); fill_normal(l.wk, rng, w_std);
        l.wv = Tensor<T>({d, d}); fill_normal(l.wv, rng, w_std);
        l.wo = Tensor<T>({d, d}); fill_normal(l.wo, rng, w_std);
        l.ln1_g = Tensor<T>({d}); l.ln1_g.fill(T(1));
        l.ln1_b = Tensor<T>({d});
        l.ln2_g = Tensor<T>({d}); l.ln2_g.fill(T(1));
        l.ln2_b = Tensor<T>({d});
        l.w1 = Tensor<T>({f, d}); fill_normal(l.w1, rng, w_std);
        l.b1 = Tensor<T>({f});
        l.w2 = Tensor<T>({d, f}); fill_normal(l.w2, rng, 1.0 / std::sqrt(double(f)));
        l.b2 = Tensor<T>({d});
    }
    bb.lnf_g = Tensor<T>({d}); bb.lnf_g.fill(T(1));
    bb.lnf_b = Tensor<T>({d});
    return bb;
}

// --------------------------------------------------------------------------
// Patch encoding and token masking

// Non-overlapping patchify in row-major order, flatten each patch (y, x, c),
// then the frozen linear projection. Returns [P^2, D].
template <typename T>
Tensor<T> encode_patches(const Tensor<float>& image, const FrozenBackbone<T>& bb) {
    const int64_t res = bb.cfg.resolution;
    const int64_t p = bb.cfg.patch;
    if (image.shape != std::vector<int64_t>({res, res, 3})) {
        throw ShapeError("encode_patches: image shape " + image.shape_str() +
                         " does not match configured resolution " + std::to_string(res));
    }
    const int64_t side = res / p;
    const int64_t n = side * side;
    const int64_t pd = bb.cfg.patch_dim();
    Tensor<T> flat({n, pd});
    for (int64_t py = 0; py < side; ++py) {
        for (int64_t px = 0; px < side; ++px) {
            T* dst = flat.data() + (py * side + px) * pd;
            for (int64_t y = 0; y < p; ++y) {
                for (int64_t x = 0; x < p; ++x) {
                    const float* src = image.data() + ((py * p + y) * res + px * p + x) * 3;
                    *dst++ = T(src[0]);
                    *dst++ = T(src[1]);
                    *dst++ = T(src[2]);
                }
            }
        }
    }
    Tensor<T> tokens({n, bb.cfg.width});
    gemm(false, true, n, bb.cfg.width, pd, T(1), flat.data(), pd, bb.patch_w.data(),
         pd, T(0), tokens.data(), bb.cfg.width);
    for (int64_t i = 0; i < n; ++i) {
        T* row = tokens.data() + i * bb.cfg.width;
        for (int64_t j = 0; j < bb.cfg.width; ++j) row[j] += bb.patch_b[size_t(j)];
    }
    return tokens;
}

struct MaskSpec {
    float ratio = 0.0f;
    uint64_t seed = 0;

    void validate() const {
        if (!(ratio >= 0.0f && ratio <= 1.0f))
            throw ConfigError("mask ratio must lie in [0, 1]");
    }
};

struct MaskRealization {
    std::vector<uint8_t> keep;  // 1 = token kept

    int64_t kept() const {
        int64_t n = 0;
        for (const uint8_t k : keep) n += k;
        return n;
    }
};

// One Bernoulli draw per token row: keep iff the i-th uniform() of the seeded
// stream is >= ratio (keep-probability 1 - r); masked rows are zeroed in full.
template <typename T>
std::pair<Tensor<T>, MaskRealization> apply_mask(const Tensor<T>& patches,
                                                 const MaskSpec& spec) {
    spec.validate();
    const int64_t n = patches.shape[0];
    const int64_t d = patches.shape[1];
    Rng rng(spec.seed);
    MaskRealization real;
    real.keep.resize(size_t(n));
    Tensor<T> out = patches;
    for (int64_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform() >= double(spec.ratio);
        real.keep[size_t(i)] = keep ? 1 : 0;
        if (!keep) {
            T* row = out.data() + i * d;
            for (int64_t j = 0; j < d; ++j) row[j] = T(0);
        }
    }
    return {std::move(out), std::move(real)};
}

// --------------------------------------------------------------------------
// Condition assembly

enum class Segment : uint8_t { aux = 0, image = 1, caption = 2, query = 3 };

enum class ConditionMode : uint8_t {
    image_only = 0,
    paired = 1,
    unconditional = 2,
    image_caption = 3,  // edit probe: source patches + target caption
};

inline const char* to_string(ConditionMode m) {
    switch (m) {
        case ConditionMode::image_only: return "image-only";
        case ConditionMode::paired: return "paired";
        case ConditionMode::unconditional: return "unconditional";
        case ConditionMode::image_caption: return "image+caption";
    }
    return "?";
}

template <typename T>
struct ConditionSequence {
    Tensor<T> tokens;               // [S, D]
    std::vector<Segment> segments;  // length S

    int64_t length() const { return tokens.shape.empty() ? 0 : tokens.shape[0]; }
};

template <typename T>
ConditionSequence<T> build_condition(ConditionMode mode, const FrozenBackbone<T>& bb,
                                     const Tensor<T>* patches,
                                     const shapeworld::CaptionTokens* caption) {
    const bool wants_image =
        mode == ConditionMode::image_only || mode == ConditionMode::image_caption;
    const bool wants_caption =
        mode == ConditionMode::paired || mode == ConditionMode::image_caption;
    if (wants_image && !patches)
        throw ConfigError(std::string(to_string(mode)) + " mode requires patch embeddings");
    if (wants_caption && !caption)
        throw ConfigError(std::string(to_string(mode)) + " mode requires a caption");

    const int64_t d = bb.cfg.width;
    int64_t s = bb.cfg.aux_tokens;
    if (wants_image) s += patches->shape[0];
    if (wants_caption) s += int64_t(caption->size());

    ConditionSequence<T> seq;
    seq.tokens = Tensor<T>({s, d});
    seq.segments.reserve(size_t(s));
    T* dst = seq.tokens.data();
    for (int64_t i = 0; i < bb.cfg.aux_tokens; ++i) {
        std::copy_n(bb.aux.data() + i * d, d, dst);
        dst += d;
        seq.segments.push_back(Segment::aux);
    }
    if (wants_image) {
        if (patches->shape[1] != d)
            throw ShapeError("patch embedding width != backbone width");
        std::copy_n(patches->data(), patches->numel(), dst);
        dst += patches->numel();
        seq.segments.insert(seq.segments.end(), size_t(patches->shape[0]), Segment::image);
    }
    if (wants_caption) {
        for (const uint16_t id : *caption) {
            if (id >= shapeworld::kVocabSize)
                throw ConfigError("caption token id out of vocabulary");
            std::copy_n(bb.caption_table.data() + int64_t(id) * d, d, dst);
            dst += d;
            seq.segments.push_back(Segment::caption);
        }
    }
    return seq;
}

// --------------------------------------------------------------------------
// Residual query adapter: K learned queries cross-attend over the condition,
// a feed-forward maps the attended values, and the K outputs are appended.
// The final projection starts at zero, so a fresh adapter appends zero rows.

struct AdapterConfig {
    int64_t queries = 16;  // K
    int64_t width = 64;    // D, must match backbone width
    int64_t heads = 4;
    int64_t ffn_mult = 4;
    uint64_t init_seed = 0;

    void validate() const {
        if (queries < 1 || width < 1 || heads < 1)
            throw ConfigError("adapter dims must be positive");
        if (width % heads != 0) throw ConfigError("adapter width % heads != 0");
    }
};

template <typename T>
struct Adapter {
    AdapterConfig cfg;
    Param<T> queries;          // [K, D]
    Param<T> wq, wk, wv, wo;   // [D, D]
    Param<T> w1, b1;           // [F, D], [F]
    Param<T> w2, b2;           // [D, F], [D]; zero-initialized

    template <class F>
    void for_each_param(F&& f) {
        f("adapter.queries", queries);
        f("adapter.wq", wq); f("adapter.wk", wk);
        f("adapter.wv", wv); f("adapter.wo", wo);
        f("adapter.w1", w1); f("adapter.b1", b1);
        f("adapter.w2", w2); f("adapter.b2", b2);
    }

    int64_t param_count() const {
        int64_t n = 0;
        const_cast<Adapter*>(this)->for_each_param(
            [&](const std::string&, const Param<T>& p) { n += p.w.numel(); });
        return n;
    }

    void zero_grads() {
        for_each_param([](const std::string&, Param<T>& p) { p.zero_grad(); });
    }
};

template <typename T>
Adapter<T> make_adapter(const AdapterConfig& cfg) {
    cfg.validate();
    Adapter<T> a;
    a.cfg = cfg;
    Rng rng(derive_seed(cfg.init_seed, 0xada90000ull));
    const int64_t d = cfg.width;
    const int64_t f = cfg.ffn_mult * d;
    const double w_std = 1.0 / std::sqrt(double(d));
    a.queries = Param<T>({cfg.queries, d});
    fill_normal(a.queries.w, rng, 1.0);
    a.wq = Param<T>({d, d}); fill_normal(a.wq.w, rng, w_std);
    a.wk = Param<T>({d, d}); fill_normal(a.wk.w, rng, w_std);
    a.wv = Param<T>({d, d}); fill_normal(a.wv.w, rng, w_std);
    a.wo = Param<T>({d, d}); fill_normal(a.wo.w, rng, w_std);
    a.w1 = Param<T>({f, d}); fill_normal(a.w1.w, rng, w_std);
    a.b1 = Param<T>({f});
    a.w2 = Param<T>({d, f});  // stays zero
    a.b2 = Param<T>({d});
    return a;
}

template <typename T>
struct AdapterCache {
    Tensor<T> input;   // [S, D] copy of the attended condition
    Tensor<T> qp, kp, vp;  // projections
    AttentionCache<T> att;
    Tensor<T> att_out;     // [K, D] pre-wo
    Tensor<T> att_proj;    // [K, D] post-wo
    Tensor<T> hid_pre;     // [K, F]
    Tensor<T> hid;         // [K, F]
};

// Returns the K adapter output rows for condition tokens c.
template <typename T>
Tensor<T> adapter_forward(const ConditionSequence<T>& c, Adapter<T>& a,
                          AdapterCache<T>& cache) {
    if (c.length() == 0) throw ConfigError("adapter input condition is empty");
    const int64_t s = c.length();
    const int64_t d = a.cfg.width;
    const int64_t k = a.cfg.queries;
    const int64_t f = a.cfg.ffn_mult * d;
    if (c.tokens.shape[1] != d) throw ShapeError("adapter width != condition width");

    cache.input = c.tokens;
    cache.qp = Tensor<T>({k, d});
    linear_forward(a.queries.w.data(), k, d, a.wq, nullptr, cache.qp.data());
    cache.kp = Tensor<T>({s, d});
    linear_forward(c.tokens.data(), s, d, a.wk, nullptr, cache.kp.data());
    cache.vp = Tensor<T>({s, d});
    linear_forward(c.tokens.data(), s, d, a.wv, nullptr, cache.vp.data());

    cache.att_out = Tensor<T>({k, d});
    attention_forward(cache.qp.data(), cache.kp.data(), cache.vp.data(), k, s, d,
                      a.cfg.heads, cache.att_out.data(), cache.att);
    cache.att_proj = Tensor<T>({k, d});
    linear_forward(cache.att_out.data(), k, d, a.wo, nullptr, cache.att_proj.data());

    cache.hid_pre = Tensor<T>({k, f});
    linear_forward(cache.att_proj.data(), k, d, a.w1, &a.b1, cache.hid_pre.data());
    cache.hid = cache.hid_pre;
    for (auto& x : cache.hid.v) x = gelu(x);

    Tensor<T> out({k, d});
    linear_forward(cache.hid.data(), k, f, a.w2, &a.b2, out.data());
    return out;
}

// Accumulates parameter gradients from d(output rows); the condition input is
// a leaf (frozen embeddings / frozen patch features), so no input grads.
template <typename T>
void adapter_backward(const AdapterCache<T>& cache, Adapter<T>& a, const Tensor<T>& dout) {
    const int64_t s = cache.input.shape[0];
    const int64_t d = a.cfg.width;
    const int64_t k = a.cfg.queries;
    const int64_t f = a.cfg.ffn_mult * d;

    Tensor<T> dhid({k, f});
    linear_backward(cache.hid.data(), dout.data(), k, f, a.w2, &a.b2, dhid.data(),
                    true, false);
    for (size_t i = 0; i < dhid.v.size(); ++i) dhid[i] *= gelu_grad(cache.hid_pre[i]);

    Tensor<T> datt_proj({k, d});
    linear_backward(cache.att_proj.data(), dhid.data(), k, d, a.w1, &a.b1,
                    datt_proj.data(), true, false);

    Tensor<T> datt_out({k, d});
    linear_backward(cache.att_out.data(), datt_proj.data(), k, d, a.wo, nullptr,
                    datt_out.data(), true, false);

    Tensor<T> dqp({k, d}), dkp({s, d}), dvp({s, d});
    attention_backward(cache.att, cache.qp.data(), cache.kp.data(), cache.vp.data(),
                       datt_out.data(), dqp.data(), dkp.data(), dvp.data());

    linear_backward(a.queries.w.data(), dqp.data(), k, d, a.wq, nullptr,
                    a.queries.g.data(), true, true);
    linear_backward(cache.input.data(), dkp.data(), s, d, a.wk, nullptr, nullptr);
    linear_backward(cache.input.data(), dvp.data(), s, d, a.wv, nullptr, nullptr);
}

// rqa_forward: append the K adapter outputs (segment = query); the input rows
// are untouched.
template <typename T>
ConditionSequence<T> rqa_forward(const ConditionSequence<T>& c, Adapter<T>& a,
                                 AdapterCache<T>& cache) {
    const Tensor<T> q_out = adapter_forward(c, a, cache);
    const int64_t s = c.length();
    const int64_t k = a.cfg.queries;
    const int64_t d = a.cfg.width;
    ConditionSequence<T> out;
    out.tokens = Tensor<T>({s + k, d});
    std::copy_n(c.tokens.data(), c.tokens.numel(), out.tokens.data());
    std::copy_n(q_out.data(), q_out.numel(), out.tokens.data() + c.tokens.numel());
    out.segments = c.segments;
    out.segments.insert(out.segments.end(), size_t(k), Segment::query);
    return out;
}

// --------------------------------------------------------------------------
// Frozen encoder pass over the assembled condition

template <typename T>
struct BackboneLayerCache {
    LayerNormCache<T> ln1, ln2;
    Tensor<T> x_in;    // [S, D]
    Tensor<T> a;       // ln1 out
    Tensor<T> q, k, v;
    AttentionCache<T> att;
    Tensor<T> att_out;  // pre-wo
    Tensor<T> x_mid;    // after attention residual
    Tensor<T> b;        // ln2 out
    Tensor<T> h1_pre, h1;
};

template <typename T>
struct BackboneCache {
    std::vector<BackboneLayerCache<T>> layers;
    LayerNormCache<T> lnf;
    int64_t s = 0;
};

// h = encoder(tokens + pos). Deterministic; bidirectional attention.
template <typename T>
Tensor<T> backbone_forward(const ConditionSequence<T>& seq, const FrozenBackbone<T>& bb,
                           BackboneCache<T>& cache) {
    const int64_t s = seq.length();
    const int64_t d = bb.cfg.width;
    if (seq.tokens.shape[1] != d)
        throw ShapeError("condition width != backbone width");
    if (s > bb.pos_rows)
        throw ConfigError("condition length exceeds backbone positional table");
    cache.s = s;
    const int64_t f = bb.cfg.ffn_mult * d;

    Tensor<T> x = seq.tokens;
    for (int64_t i = 0; i < s * d; ++i) x[size_t(i)] += bb.pos[size_t(i)];

    cache.layers.clear();
    cache.layers.resize(bb.layers.size());
    for (size_t li = 0; li < bb.layers.size(); ++li) {
        const auto& l = bb.layers[li];
        auto& lc = cache.layers[li];
        lc.x_in = x;

        lc.a = Tensor<T>({s, d});
        layernorm_forward(x.data(), s, d, l.ln1_g.data(), l.ln1_b.data(), lc.a.data(),
                          lc.ln1);
        lc.q = Tensor<T>({s, d});
        lc.k = Tensor<T>({s, d});
        lc.v = Tensor<T>({s, d});
        gemm(false, true, s, d, d, T(1), lc.a.data(), d, l.wq.data(), d, T(0), lc.q.data(), d);
        gemm(false, true, s, d, d, T(1), lc.a.data(), d, l.wk.data(), d, T(0), lc.k.data(), d);
        gemm(false, true, s, d, d, T(1), lc.a.data(), d, l.wv.data(), d, T(0), lc.v.data(), d);
        lc.att_out = Tensor<T>({s, d});
        attention_forward(lc.q.data(), lc.k.data(), lc.v.data(), s, s, d, bb.cfg.heads,
                          lc.att_out.data(), lc.att);
        Tensor<T> proj({s, d});
        gemm(false, true, s, d, d, T(1), lc.att_out.data(), d, l.wo.data(), d, T(0),
             proj.data(), d);
        for (int64_t i = 0; i < s * d; ++i) x[size_t(i)] += proj[size_t(i)];
        lc.x_mid = x;

        lc.b = Tensor<T>({s, d});
        layernorm_forward(x.data(), s, d, l.ln2_g.data(), l.ln2_b.data(), lc.b.data(),
                          lc.ln2);
        lc.h1_pre = Tensor<T>({s, f});
        gemm(false, true, s, f, d, T(1), lc.b.data(), d, l.w1.data(), d, T(0),
             lc.h1_pre.data(), f);
        for (int64_t i = 0; i < s; ++i) {
            T* row = lc.h1_pre.data() + i * f;
            for (int64_t j = 0; j < f; ++j) row[j] += l.b1[size_t(j)];
        }
        lc.h1 = lc.h1_pre;
        for (auto& xv : lc.h1.v) xv = gelu(xv);
        Tensor<T> ffn({s, d});
        gemm(false, true, s, d, f, T(1), lc.h1.data(), f, l.w2.data(), f, T(0),
             ffn.data(), d);
        for (int64_t i = 0; i < s; ++i) {
            T* row = x.data() + i * d;
            const T* frow = ffn.data() + i * d;
            for (int64_t j = 0; j < d; ++j) row[j] += frow[j] + l.b2[size_t(j)];
        }
    }
    Tensor<T> h({s, d});
    layernorm_forward(x.data(), s, d, bb.lnf_g.data(), bb.lnf_b.data(), h.data(),
                      cache.lnf);
    return h;
}

// Input gradients only; backbone weights are frozen.
template <typename T>
Tensor<T> backbone_backward(const BackboneCache<T>& cache, const FrozenBackbone<T>& bb,
                            const Tensor<T>& dh) {
    const int64_t s = cache.s;
    const int64_t d = bb.cfg.width;
    const int64_t f = bb.cfg.ffn_mult * d;

    Tensor<T> dx({s, d});
    layernorm_backward(cache.lnf, dh.data(), s, d, bb.lnf_g.data(), dx.data(), nullptr,
                       nullptr);

    for (int64_t li = int64_t(bb.layers.size()) - 1; li >= 0; --li) {
        const auto& l = bb.layers[size_t(li)];
        const auto& lc = cache.layers[size_t(li)];

        // FFN branch: dx feeds both the residual and the branch.
        Tensor<T> dh1({s, f});
        gemm(false, false, s, f, d, T(1), dx.data(), d, l.w2.data(), f, T(0),
             dh1.data(), f);
        for (size_t i = 0; i < dh1.v.size(); ++i) dh1[i] *= gelu_grad(lc.h1_pre[i]);
        Tensor<T> db({s, d});
        gemm(false, false, s, d, f, T(1), dh1.data(), f, l.w1.data(), d, T(0),
             db.data(), d);
        layernorm_backward(lc.ln2, db.data(), s, d, l.ln2_g.data(), dx.data(), nullptr,
                           nullptr);

        // Attention branch.
        Tensor<T> datt_out({s, d});
        gemm(false, false, s, d, d, T(1), dx.data(), d, l.wo.data(), d, T(0),
             datt_out.data(), d);
        Tensor<T> dq({s, d}), dk({s, d}), dv({s, d});
        attention_backward(lc.att, lc.q.data(), lc.k.data(), lc.v.data(),
                           datt_out.data(), dq.data(), dk.data(), dv.data());
        Tensor<T> da({s, d});
        gemm(false, false, s, d, d, T(1), dq.data(), d, l.wq.data(), d, T(0), da.data(), d);
        gemm(false, false, s, d, d, T(1), dk.data(), d, l.wk.data(), d, T(1), da.data(), d);
        gemm(false, false, s, d, d, T(1), dv.data(), d, l.wv.data(), d, T(1), da.data(), d);
        layernorm_backward(lc.ln1, da.data(), s, d, l.ln1_g.data(), dx.data(), nullptr,
                           nullptr);
    }
    return dx;  // gradient w.r.t. (tokens + pos) == gradient w.r.t. tokens
}

// --------------------------------------------------------------------------
// Full pipeline of the conditioning side

struct ConditionerOptions {
    bool use_adapter = true;
    bool query_only = false;  // feed only the K query rows of h downstream
};

using TraceHook = std::function<void(const char*)>;

template <typename T>
struct PipelineCache {
    ConditionMode mode = ConditionMode::unconditional;
    bool used_adapter = false;
    bool query_only = false;
    int64_t seq_len = 0;  // S after adapter append
    int64_t queries = 0;
    AdapterCache<T> adapter;
    BackboneCache<T> backbone;
    MaskRealization mask;
};

// encode_patches -> apply_mask -> build_condition -> rqa -> backbone.
template <typename T>
Tensor<T> condition_pipeline(ConditionMode mode, const Tensor<float>* image,
                             const shapeworld::CaptionTokens* caption,
                             const MaskSpec& mask, const FrozenBackbone<T>& bb,
                             Adapter<T>* adapter, const ConditionerOptions& opts,
                             PipelineCache<T>& cache, const TraceHook& trace = {}) {
    cache.mode = mode;
    cache.used_adapter = adapter != nullptr && opts.use_adapter;
    cache.query_only = opts.query_only && cache.used_adapter;

    std::optional<Tensor<T>> patches;
    const bool wants_image =
        mode == ConditionMode::image_only || mode == ConditionMode::image_caption;
    if (wants_image) {
        if (!image) throw ConfigError("condition pipeline: mode requires an image");
        if (trace) trace("encode_patches");
        patches = encode_patches(*image, bb);
        if (trace) trace("mask");
        auto [masked, real] = apply_mask(*patches, mask);
        patches = std::move(masked);
        cache.mask = std::move(real);
    }
    if (trace) trace("build_condition");
    ConditionSequence<T> seq =
        build_condition(mode, bb, patches ? &*patches : nullptr, caption);
    if (cache.used_adapter) {
        if (trace) trace("rqa");
        seq = rqa_forward(seq, *adapter, cache.adapter);
        cache.queries = adapter->cfg.queries;
    }
    cache.seq_len = seq.length();
    if (trace) trace("backbone");
    Tensor<T> h = backbone_forward(seq, bb, cache.backbone);
    if (cache.query_only) {
        const int64_t k = cache.queries;
        const int64_t d = bb.cfg.width;
        Tensor<T> hq({k, d});
        std::copy_n(h.data() + (cache.seq_len - k) * d, k * d, hq.data());
        return hq;
    }
    return h;
}

// Routes d(h) back to the adapter parameters (the only trainable piece).
template <typename T>
void condition_pipeline_backward(const PipelineCache<T>& cache,
                                 const FrozenBackbone<T>& bb, Adapter<T>* adapter,
                                 const Tensor<T>& dh) {
    if (!cache.used_adapter) return;  // nothing trainable upstream
    const int64_t d = bb.cfg.width;
    const int64_t k = cache.queries;
    Tensor<T> dh_full({cache.seq_len, d});
    if (cache.query_only) {
        std::copy_n(dh.data(), k * d, dh_full.data() + (cache.seq_len - k) * d);
    } else {
        dh_full = dh;
    }
    const Tensor<T> dtokens = backbone_backward(cache.backbone, bb, dh_full);
    Tensor<T> dq_rows({k, d});
    std::copy_n(dtokens.data() + (cache.seq_len - k) * d, k * d, dq_rows.data());
    adapter_backward(cache.adapter, *adapter, dq_rows);
}

}  // namespace iomm
