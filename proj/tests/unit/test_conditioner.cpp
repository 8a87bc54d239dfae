#include <doctest.h>

#include <cmath>
#include <vector>

#include "iomm/conditioner.hpp"

using namespace iomm;
using shapeworld::CaptionTokens;

TEST_SUITE_BEGIN("conditioner");

namespace {

BackboneConfig small_backbone_cfg() {
    BackboneConfig cfg;
    cfg.layers = 2;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.aux_tokens = 4;
    cfg.patch = 4;
    cfg.resolution = 32;
    cfg.init_seed = 0;
    return cfg;
}

Tensor<float> gray_image(int64_t res, float value) {
    Tensor<float> img({res, res, 3});
    img.fill(value);
    return img;
}

Tensor<float> random_image(int64_t res, uint64_t seed) {
    Rng rng(seed);
    Tensor<float> img({res, res, 3});
    for (auto& v : img.v) v = float(2.0 * rng.uniform() - 1.0);
    return img;
}

template <typename T>
void randomize_params(Adapter<T>& adapter, uint64_t seed, double scale) {
    Rng rng(seed);
    adapter.for_each_param([&](const std::string&, Param<T>& p) {
        for (auto& v : p.w.v) v = T(rng.normal() * scale);
    });
}

// Independent double-precision helpers for the oracles.
void ref_layernorm(const std::vector<double>& x, int64_t n, int64_t d,
                   const std::vector<double>& g, const std::vector<double>& b,
                   std::vector<double>& y) {
    y.assign(size_t(n * d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += x[size_t(i * d + j)];
        mean /= double(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const double s = x[size_t(i * d + j)] - mean;
            var += s * s;
        }
        var /= double(d);
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (int64_t j = 0; j < d; ++j) {
            const double xh = (x[size_t(i * d + j)] - mean) * rstd;
            y[size_t(i * d + j)] = g.empty() ? xh : xh * g[size_t(j)] + b[size_t(j)];
        }
    }
}

// Single-head attention, q:[tq,d] k,v:[tk,d].
void ref_attention(const std::vector<double>& q, const std::vector<double>& k,
                   const std::vector<double>& v, int64_t tq, int64_t tk, int64_t d,
                   std::vector<double>& out) {
    out.assign(size_t(tq * d), 0.0);
    const double scale = 1.0 / std::sqrt(double(d));
    for (int64_t i = 0; i < tq; ++i) {
        std::vector<double> scores(static_cast<size_t>(tk));
        double mx = -1e300;
        for (int64_t j = 0; j < tk; ++j) {
            double s = 0;
            for (int64_t c = 0; c < d; ++c)
                s += q[size_t(i * d + c)] * k[size_t(j * d + c)];
            scores[size_t(j)] = s * scale;
            mx = std::max(mx, scores[size_t(j)]);
        }
        double total = 0;
        for (auto& s : scores) {
            s = std::exp(s - mx);
            total += s;
        }
        for (auto& s : scores) s /= total;
        for (int64_t j = 0; j < tk; ++j) {
            for (int64_t c = 0; c < d; ++c) {
                out[size_t(i * d + c)] += scores[size_t(j)] * v[size_t(j * d + c)];
            }
        }
    }
}

// y[n,dout] = x[n,din] . w[dout,din]^T + b
void ref_linear(const std::vector<double>& x, int64_t n, int64_t din, int64_t dout,
                const std::vector<double>& w, const std::vector<double>& b,
                std::vector<double>& y) {
    y.assign(size_t(n * dout), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t o = 0; o < dout; ++o) {
            double acc = b.empty() ? 0.0 : b[size_t(o)];
            for (int64_t c = 0; c < din; ++c)
                acc += x[size_t(i * din + c)] * w[size_t(o * din + c)];
            y[size_t(i * dout + o)] = acc;
        }
    }
}

double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <typename T>
std::vector<double> to_d(const Tensor<T>& t) {
    return std::vector<double>(t.v.begin(), t.v.end());
}

}  // namespace

TEST_CASE("encode_patches shape arithmetic") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    const auto tokens = encode_patches(gray_image(32, 0.25f), bb);
    CHECK(tokens.shape == std::vector<int64_t>({64, 64}));

    cfg.resolution = 64;
    auto bb64 = make_backbone<float>(cfg, 16);
    const auto tokens64 = encode_patches(gray_image(64, 0.25f), bb64);
    CHECK(tokens64.shape == std::vector<int64_t>({256, 64}));
}

TEST_CASE("indivisible resolution fails at construction") {
    auto cfg = small_backbone_cfg();
    cfg.patch = 5;
    CHECK_THROWS_AS(make_backbone<float>(cfg, 16), ConfigError);
}

TEST_CASE("encode_patches matches a flatten-then-matmul recomputation") {
    auto cfg = small_backbone_cfg();
    cfg.init_seed = 0;
    auto bb = make_backbone<float>(cfg, 16);
    const auto img = gray_image(32, 0.3f);
    const auto tokens = encode_patches(img, bb);
    // Every patch of a constant image flattens to the same 48-vector.
    std::vector<double> flat(48, 0.3);
    for (int64_t tok = 0; tok < 64; ++tok) {
        for (int64_t o = 0; o < 64; ++o) {
            double acc = double(bb.patch_b[size_t(o)]);
            for (int64_t c = 0; c < 48; ++c)
                acc += flat[size_t(c)] * double(bb.patch_w[size_t(o * 48 + c)]);
            CHECK(double(tokens[size_t(tok * 64 + o)]) ==
                  doctest::Approx(acc).epsilon(1e-6));
        }
    }
}

TEST_CASE("apply_mask endpoints") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    const auto patches = encode_patches(random_image(32, 3), bb);

    auto [kept_all, real0] = apply_mask(patches, MaskSpec{0.0f, 9});
    CHECK(kept_all.v == patches.v);
    CHECK(real0.kept() == 64);

    auto [none, real1] = apply_mask(patches, MaskSpec{1.0f, 9});
    CHECK(real1.kept() == 0);
    for (const float v : none.v) CHECK(v == 0.0f);
}

TEST_CASE("apply_mask replays the documented stream") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    const auto patches = encode_patches(random_image(32, 4), bb);
    const uint64_t seed = 777;
    auto [masked, real] = apply_mask(patches, MaskSpec{0.5f, seed});

    Rng replay(seed);
    int64_t expect_kept = 0;
    for (int64_t i = 0; i < 64; ++i) {
        const bool keep = replay.uniform() >= 0.5;
        CHECK(bool(real.keep[size_t(i)]) == keep);
        expect_kept += keep ? 1 : 0;
    }
    CHECK(real.kept() == expect_kept);

    auto [again, real_b] = apply_mask(patches, MaskSpec{0.5f, seed});
    CHECK(again.v == masked.v);
    CHECK(real_b.keep == real.keep);
}

TEST_CASE("mask keep-rate lands inside the 3-sigma binomial bound") {
    Tensor<float> tokens({10000, 4});
    tokens.fill(1.0f);
    for (const float r : {0.45f, 0.85f}) {
        auto [masked, real] = apply_mask(tokens, MaskSpec{r, 31337});
        const double kept = double(real.kept()) / 10000.0;
        const double bound = 3.0 * std::sqrt(double(r) * (1.0 - double(r)) / 10000.0);
        CHECK(std::abs(kept - (1.0 - double(r))) <= bound);
    }
}

TEST_CASE("build_condition lengths and segments") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    const auto patches = encode_patches(random_image(32, 5), bb);

    const auto img_seq = build_condition<float>(ConditionMode::image_only, bb, &patches, nullptr);
    CHECK(img_seq.length() == 68);
    for (int i = 0; i < 4; ++i) CHECK(img_seq.segments[size_t(i)] == Segment::aux);
    for (int i = 4; i < 68; ++i) CHECK(img_seq.segments[size_t(i)] == Segment::image);

    const auto un_seq = build_condition<float>(ConditionMode::unconditional, bb, nullptr, nullptr);
    CHECK(un_seq.length() == 4);
    for (const auto s : un_seq.segments) CHECK(s == Segment::aux);

    const CaptionTokens caption = {3, 7, 1};
    const auto pair_seq = build_condition<float>(ConditionMode::paired, bb, nullptr, &caption);
    CHECK(pair_seq.length() == 7);
    for (size_t i = 0; i < caption.size(); ++i) {
        CHECK(pair_seq.segments[4 + i] == Segment::caption);
        for (int64_t j = 0; j < 64; ++j) {
            CHECK(pair_seq.tokens[(4 + i) * 64 + size_t(j)] ==
                  bb.caption_table[size_t(caption[i]) * 64 + size_t(j)]);
        }
    }

    CHECK_THROWS_AS(build_condition<float>(ConditionMode::image_only, bb, nullptr, nullptr),
                    ConfigError);
    CHECK_THROWS_AS(build_condition<float>(ConditionMode::paired, bb, nullptr, nullptr),
                    ConfigError);
}

TEST_CASE("fresh adapter appends exactly zero rows") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    acfg.heads = 4;
    auto adapter = make_adapter<float>(acfg);

    const auto patches = encode_patches(random_image(32, 6), bb);
    const auto seq = build_condition<float>(ConditionMode::image_only, bb, &patches, nullptr);
    AdapterCache<float> cache;
    const auto refined = rqa_forward(seq, adapter, cache);
    CHECK(refined.length() == seq.length() + 16);
    // Input rows untouched, appended rows exactly zero.
    for (int64_t i = 0; i < seq.tokens.numel(); ++i)
        CHECK(refined.tokens[size_t(i)] == seq.tokens[size_t(i)]);
    for (int64_t i = seq.tokens.numel(); i < refined.tokens.numel(); ++i)
        CHECK(refined.tokens[size_t(i)] == 0.0f);
    for (int64_t i = seq.length(); i < refined.length(); ++i)
        CHECK(refined.segments[size_t(i)] == Segment::query);
}

TEST_CASE("rqa output length S+K for varying S") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    auto adapter = make_adapter<float>(acfg);
    for (const auto mode : {ConditionMode::unconditional, ConditionMode::paired}) {
        const CaptionTokens caption = {1, 2, 3, 4};
        const auto seq = build_condition<float>(
            mode, bb, nullptr,
            mode == ConditionMode::paired ? &caption : nullptr);
        AdapterCache<float> cache;
        CHECK(rqa_forward(seq, adapter, cache).length() == seq.length() + 16);
    }
}

TEST_CASE("adapter matches a hand-computed attention oracle (K=2, D=4, 1 head)") {
    AdapterConfig acfg;
    acfg.queries = 2;
    acfg.width = 4;
    acfg.heads = 1;
    acfg.ffn_mult = 2;
    auto adapter = make_adapter<float>(acfg);
    randomize_params(adapter, 2024, 0.7);

    ConditionSequence<float> c;
    c.tokens = Tensor<float>({3, 4});
    Rng rng(55);
    for (auto& v : c.tokens.v) v = float(rng.normal());
    c.segments.assign(3, Segment::aux);

    AdapterCache<float> cache;
    const auto out = adapter_forward(c, adapter, cache);

    // Double-precision reference with the same parameters.
    std::vector<double> qp, kp, vp, att, atto, hid_pre, outref;
    ref_linear(to_d(adapter.queries.w), 2, 4, 4, to_d(adapter.wq.w), {}, qp);
    ref_linear(to_d(c.tokens), 3, 4, 4, to_d(adapter.wk.w), {}, kp);
    ref_linear(to_d(c.tokens), 3, 4, 4, to_d(adapter.wv.w), {}, vp);
    ref_attention(qp, kp, vp, 2, 3, 4, att);
    ref_linear(att, 2, 4, 4, to_d(adapter.wo.w), {}, atto);
    ref_linear(atto, 2, 4, 8, to_d(adapter.w1.w), to_d(adapter.b1.w), hid_pre);
    for (auto& v : hid_pre) v = ref_gelu(v);
    ref_linear(hid_pre, 2, 8, 4, to_d(adapter.w2.w), to_d(adapter.b2.w), outref);
    for (size_t i = 0; i < outref.size(); ++i) {
        CHECK(double(out[i]) == doctest::Approx(outref[i]).epsilon(1e-5));
    }
}

TEST_CASE("backbone is deterministic and length-preserving") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    for (const int64_t s : {4, 68, 84}) {
        ConditionSequence<float> seq;
        seq.tokens = Tensor<float>({s, 64});
        Rng rng(static_cast<uint64_t>(s));
        for (auto& v : seq.tokens.v) v = float(rng.normal());
        seq.segments.assign(size_t(s), Segment::aux);
        BackboneCache<float> c1, c2;
        const auto h1 = backbone_forward(seq, bb, c1);
        const auto h2 = backbone_forward(seq, bb, c2);
        CHECK(h1.shape == std::vector<int64_t>({s, 64}));
        CHECK(h1.v == h2.v);
    }
}

TEST_CASE("one-layer backbone matches an independent double reference") {
    BackboneConfig cfg;
    cfg.layers = 1;
    cfg.width = 4;
    cfg.heads = 1;
    cfg.ffn_mult = 2;
    cfg.aux_tokens = 1;
    cfg.patch = 4;
    cfg.resolution = 32;
    cfg.init_seed = 12;
    auto bb = make_backbone<float>(cfg, 2);

    ConditionSequence<float> seq;
    seq.tokens = Tensor<float>({2, 4});
    Rng rng(77);
    for (auto& v : seq.tokens.v) v = float(rng.normal());
    seq.segments.assign(2, Segment::aux);

    BackboneCache<float> cache;
    const auto h = backbone_forward(seq, bb, cache);

    const auto& l = bb.layers[0];
    std::vector<double> x = to_d(seq.tokens);
    for (int64_t i = 0; i < 8; ++i) x[size_t(i)] += double(bb.pos[size_t(i)]);
    std::vector<double> a, q, k, v, att, proj, b, h1, ffn, href;
    ref_layernorm(x, 2, 4, to_d(l.ln1_g), to_d(l.ln1_b), a);
    ref_linear(a, 2, 4, 4, to_d(l.wq), {}, q);
    ref_linear(a, 2, 4, 4, to_d(l.wk), {}, k);
    ref_linear(a, 2, 4, 4, to_d(l.wv), {}, v);
    ref_attention(q, k, v, 2, 2, 4, att);
    ref_linear(att, 2, 4, 4, to_d(l.wo), {}, proj);
    for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
    ref_layernorm(x, 2, 4, to_d(l.ln2_g), to_d(l.ln2_b), b);
    ref_linear(b, 2, 4, 8, to_d(l.w1), to_d(l.b1), h1);
    for (auto& hv : h1) hv = ref_gelu(hv);
    ref_linear(h1, 2, 8, 4, to_d(l.w2), to_d(l.b2), ffn);
    for (size_t i = 0; i < x.size(); ++i) x[i] += ffn[i];
    ref_layernorm(x, 2, 4, to_d(bb.lnf_g), to_d(bb.lnf_b), href);
    for (size_t i = 0; i < href.size(); ++i) {
        CHECK(double(h[i]) == doctest::Approx(href[i]).epsilon(1e-5));
    }
}

TEST_CASE("pipeline: unconditional h has length T+K; segments end with queries") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    auto adapter = make_adapter<float>(acfg);
    PipelineCache<float> cache;
    const auto h = condition_pipeline<float>(ConditionMode::unconditional, nullptr,
                                             nullptr, MaskSpec{0.f, 0}, bb, &adapter,
                                             {}, cache);
    CHECK(h.shape == std::vector<int64_t>({20, 64}));
}

TEST_CASE("pipeline with r=1 equals pipeline on zeroed patch rows") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    auto adapter = make_adapter<float>(acfg);
    randomize_params(adapter, 88, 0.3);
    const auto img = random_image(32, 42);

    PipelineCache<float> c1;
    const auto h_masked = condition_pipeline<float>(
        ConditionMode::image_only, &img, nullptr, MaskSpec{1.0f, 5}, bb, &adapter, {}, c1);

    Tensor<float> zero_patches({64, 64});
    const auto seq = build_condition<float>(ConditionMode::image_only, bb, &zero_patches, nullptr);
    AdapterCache<float> ac;
    const auto refined = rqa_forward(seq, adapter, ac);
    BackboneCache<float> bc;
    const auto h_manual = backbone_forward(refined, bb, bc);
    CHECK(h_masked.v == h_manual.v);
}

TEST_CASE("pipeline equals the manual four-op composition") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    auto adapter = make_adapter<float>(acfg);
    randomize_params(adapter, 12, 0.3);
    const auto img = random_image(32, 43);

    PipelineCache<float> cache;
    const auto h = condition_pipeline<float>(ConditionMode::image_only, &img, nullptr,
                                             MaskSpec{0.0f, 5}, bb, &adapter, {}, cache);

    const auto patches = encode_patches(img, bb);
    auto [masked, real] = apply_mask(patches, MaskSpec{0.0f, 5});
    const auto seq = build_condition<float>(ConditionMode::image_only, bb, &masked, nullptr);
    AdapterCache<float> ac;
    const auto refined = rqa_forward(seq, adapter, ac);
    BackboneCache<float> bc;
    const auto h_manual = backbone_forward(refined, bb, bc);
    CHECK(h.v == h_manual.v);
}

TEST_CASE("fresh-adapter pipeline appends zero query rows (residual start)") {
    auto cfg = small_backbone_cfg();
    auto bb = make_backbone<float>(cfg, 16);
    AdapterConfig acfg;
    acfg.queries = 16;
    acfg.width = 64;
    auto adapter = make_adapter<float>(acfg);  // zero-init output projection
    const auto img = random_image(32, 44);

    const auto patches = encode_patches(img, bb);
    const auto seq = build_condition<float>(ConditionMode::image_only, bb, &patches, nullptr);
    AdapterCache<float> ac;
    const auto refined = rqa_forward(seq, adapter, ac);
    for (int64_t i = seq.tokens.numel(); i < refined.tokens.numel(); ++i) {
        CHECK(refined.tokens[size_t(i)] == 0.0f);
    }
}

TEST_CASE("adapter gradients match central finite differences (double path)") {
    BackboneConfig cfg;
    cfg.layers = 1;
    cfg.width = 4;
    cfg.heads = 1;
    cfg.ffn_mult = 2;
    cfg.aux_tokens = 2;
    cfg.patch = 4;
    cfg.resolution = 8;  // 4 patch tokens
    cfg.init_seed = 3;
    auto bb = make_backbone<double>(cfg, 2);

    AdapterConfig acfg;
    acfg.queries = 2;
    acfg.width = 4;
    acfg.heads = 1;
    acfg.ffn_mult = 2;

    const auto img = random_image(8, 9);
    const MaskSpec mask{0.3f, 17};
    Rng wrng(123);
    Tensor<double> w({8, 4});  // S = 2 aux + 4 image + 2 query = 8
    for (auto& v : w.v) v = wrng.normal();

    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto adapter = make_adapter<double>(acfg);
        randomize_params(adapter, 1000 + seed, 0.5);

        auto loss_fn = [&](Adapter<double>& a) {
            PipelineCache<double> cache;
            const auto h = condition_pipeline<double>(
                ConditionMode::image_only, &img, nullptr, mask, bb, &a, {}, cache);
            double acc = 0;
            for (size_t i = 0; i < h.v.size(); ++i) acc += h[i] * w[i];
            return acc;
        };

        // Analytic gradients.
        adapter.zero_grads();
        PipelineCache<double> cache;
        const auto h = condition_pipeline<double>(ConditionMode::image_only, &img,
                                                  nullptr, mask, bb, &adapter, {}, cache);
        (void)h;
        condition_pipeline_backward(cache, bb, &adapter, w);

        const double fd_step = 1e-5;
        int checked = 0;
        adapter.for_each_param([&](const std::string& name, Param<double>& p) {
            for (size_t i = 0; i < p.w.v.size(); ++i) {
                const double keep = p.w[i];
                p.w[i] = keep + fd_step;
                const double lp = loss_fn(adapter);
                p.w[i] = keep - fd_step;
                const double lm = loss_fn(adapter);
                p.w[i] = keep;
                const double fd = (lp - lm) / (2 * fd_step);
                const double denom = std::max({1e-8, std::abs(fd), std::abs(p.g[i])});
                const double rel = std::abs(fd - p.g[i]) / denom;
                if (rel > 1e-6) {
                    CAPTURE(name);
                    CAPTURE(i);
                    CHECK(rel <= 1e-6);
                }
                ++checked;
            }
        });
        CHECK(checked > 100);
    }
}

TEST_CASE("frozen backbone digest is reproducible from seed") {
    auto cfg = small_backbone_cfg();
    auto a = make_backbone<float>(cfg, 16);
    auto b = make_backbone<float>(cfg, 16);
    CHECK(a.digest() == b.digest());
    cfg.init_seed = 1;
    auto c = make_backbone<float>(cfg, 16);
    CHECK(a.digest() != c.digest());
}

TEST_SUITE_END();
