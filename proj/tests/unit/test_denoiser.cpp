#include <doctest.h>

#include <cmath>
#include <vector>

#include "iomm/denoiser.hpp"
#include "iomm/flow.hpp"

using namespace iomm;

TEST_SUITE_BEGIN("denoiser");

namespace {

DenoiserConfig tiny_cfg() {
    DenoiserConfig cfg;
    cfg.blocks = 1;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.patch = 1;
    cfg.resolution = 2;  // 4 tokens of dim 3
    cfg.time_dim = 8;
    cfg.mlp_mult = 2;
    cfg.cond_dim = 4;
    cfg.omega_max = 100.0;
    cfg.init_seed = 5;
    return cfg;
}

template <typename T>
void randomize_params(Denoiser<T>& dn, uint64_t seed, double scale) {
    Rng rng(seed);
    dn.for_each_param([&](const std::string&, Param<T>& p) {
        for (auto& v : p.w.v) v = T(rng.normal() * scale);
    });
}

template <typename T>
Tensor<T> random_tensor(const std::vector<int64_t>& shape, uint64_t seed) {
    Tensor<T> t(shape);
    Rng rng(seed);
    for (auto& v : t.v) v = T(rng.normal());
    return t;
}

}  // namespace

TEST_CASE("time_embed basics") {
    const auto at0 = time_embed(0.0f, 8, 100.0);
    for (int i = 0; i < 8; i += 2) CHECK(at0[size_t(i)] == 0.0f);
    for (int i = 1; i < 8; i += 2) CHECK(at0[size_t(i)] == 1.0f);

    CHECK(time_embed(0.3f, 32, 1000.0).numel() == 32);
    CHECK(time_embed(0.3f, 64, 1000.0).numel() == 64);

    const auto at_half = time_embed(0.5f, 8, 100.0);  // omega_0 = 1
    CHECK(double(at_half[0]) == doctest::Approx(std::sin(0.5)).epsilon(1e-6));
    CHECK(double(at_half[0]) == doctest::Approx(0.4794).epsilon(1e-3));
}

TEST_CASE("output shape equals input image shape") {
    DenoiserConfig cfg;
    cfg.blocks = 2;
    cfg.width = 32;
    cfg.heads = 4;
    cfg.patch = 4;
    cfg.resolution = 32;
    cfg.time_dim = 16;
    cfg.cond_dim = 8;
    auto dn = make_denoiser<float>(cfg);
    const auto h = random_tensor<float>({5, 8}, 3);
    for (int64_t b : {1, 4}) {
        for (int64_t i = 0; i < b; ++i) {  // batch handled by per-element calls
            const auto x_t = random_tensor<float>({32, 32, 3}, 10 + uint64_t(i));
            DenoiserCache<float> cache;
            const auto out = denoiser_forward(dn, x_t, 0.4f, h, cache);
            CHECK(out.shape == x_t.shape);
        }
    }
}

TEST_CASE("freshly initialized denoiser outputs exactly zero") {
    auto dn = make_denoiser<float>(tiny_cfg());
    const auto x_t = random_tensor<float>({2, 2, 3}, 1);
    const auto h = random_tensor<float>({3, 4}, 2);
    DenoiserCache<float> cache;
    const auto out = denoiser_forward(dn, x_t, 0.7f, h, cache);
    for (const float v : out.v) CHECK(v == 0.0f);
}

TEST_CASE("tiny forward matches an independent double reference") {
    // B=1 block, width 8, 2x2 image with 1x1 patches, 2 condition tokens.
    auto cfg = tiny_cfg();
    auto dn = make_denoiser<double>(cfg);
    randomize_params(dn, 99, 0.4);
    const auto x_t = random_tensor<double>({2, 2, 3}, 21);
    const auto h = random_tensor<double>({2, 4}, 22);
    const double t = 0.35;

    DenoiserCache<double> cache;
    const auto out = denoiser_forward(dn, x_t, t, h, cache);

    // Reference, plain loops.
    const int64_t n = 4, w = 8, s = 2, pd = 3, hidden = 16;
    auto linear = [](const std::vector<double>& x, int64_t rows, int64_t din,
                     int64_t dout, const Tensor<double>& wt, const Tensor<double>* bias) {
        std::vector<double> y(size_t(rows * dout), 0.0);
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t o = 0; o < dout; ++o) {
                double acc = bias ? (*bias)[size_t(o)] : 0.0;
                for (int64_t c = 0; c < din; ++c)
                    acc += x[size_t(i * din + c)] * wt.v[size_t(o * din + c)];
                y[size_t(i * dout + o)] = acc;
            }
        return y;
    };
    auto layernorm = [](std::vector<double> x, int64_t rows, int64_t d) {
        for (int64_t i = 0; i < rows; ++i) {
            double mean = 0, var = 0;
            for (int64_t j = 0; j < d; ++j) mean += x[size_t(i * d + j)];
            mean /= double(d);
            for (int64_t j = 0; j < d; ++j) {
                const double dv = x[size_t(i * d + j)] - mean;
                var += dv * dv;
            }
            var /= double(d);
            const double rstd = 1.0 / std::sqrt(var + 1e-5);
            for (int64_t j = 0; j < d; ++j)
                x[size_t(i * d + j)] = (x[size_t(i * d + j)] - mean) * rstd;
        }
        return x;
    };
    auto silu_ref = [](double x) { return x / (1.0 + std::exp(-x)); };
    auto gelu_ref = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };

    // Time pathway.
    std::vector<double> temb(8);
    for (int kk = 0; kk < 4; ++kk) {
        const double om = std::pow(100.0, double(kk) / 3.0);
        temb[size_t(2 * kk)] = std::sin(t * om);
        temb[size_t(2 * kk + 1)] = std::cos(t * om);
    }
    auto th = linear(temb, 1, 8, w, dn.t_w1.w, &dn.t_b1.w);
    for (auto& v : th) v = silu_ref(v);
    auto tvec = linear(th, 1, w, w, dn.t_w2.w, &dn.t_b2.w);
    std::vector<double> sm = tvec;
    for (auto& v : sm) v = silu_ref(v);

    auto condp = linear(std::vector<double>(h.v.begin(), h.v.end()), s, 4, w,
                        dn.cond_w.w, &dn.cond_b.w);

    // Patchify 1x1: token order row-major over pixels.
    std::vector<double> xflat(size_t(n * pd));
    for (int64_t i = 0; i < n * pd; ++i) xflat[size_t(i)] = x_t[size_t(i)];
    auto x = linear(xflat, n, pd, w, dn.in_w.w, &dn.in_b.w);
    for (int64_t i = 0; i < n * w; ++i) x[size_t(i)] += dn.pos.w[size_t(i)];

    const auto& blk = dn.blocks[0];
    auto mod = linear(sm, 1, w, 6 * w, blk.mod_w.w, &blk.mod_b.w);
    auto a = layernorm(x, n, w);
    std::vector<double> amod(size_t(n * w));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
            amod[size_t(i * w + j)] =
                a[size_t(i * w + j)] * (1.0 + mod[size_t(w + j)]) + mod[size_t(j)];
    std::vector<double> kv(size_t((n + s) * w));
    std::copy(amod.begin(), amod.end(), kv.begin());
    std::copy(condp.begin(), condp.end(), kv.begin() + n * w);
    auto q = linear(amod, n, w, w, blk.wq.w, nullptr);
    auto k = linear(kv, n + s, w, w, blk.wk.w, nullptr);
    auto v = linear(kv, n + s, w, w, blk.wv.w, nullptr);
    // Two heads of dim 4.
    std::vector<double> att(size_t(n * w), 0.0);
    const int64_t heads = 2, hd = 4;
    for (int64_t hh = 0; hh < heads; ++hh) {
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> scores(static_cast<size_t>(n + s));
            double mx = -1e300;
            for (int64_t j = 0; j < n + s; ++j) {
                double acc = 0;
                for (int64_t c = 0; c < hd; ++c)
                    acc += q[size_t(i * w + hh * hd + c)] * k[size_t(j * w + hh * hd + c)];
                scores[size_t(j)] = acc / std::sqrt(double(hd));
                mx = std::max(mx, scores[size_t(j)]);
            }
            double total = 0;
            for (auto& sc : scores) {
                sc = std::exp(sc - mx);
                total += sc;
            }
            for (int64_t j = 0; j < n + s; ++j) {
                for (int64_t c = 0; c < hd; ++c)
                    att[size_t(i * w + hh * hd + c)] +=
                        scores[size_t(j)] / total * v[size_t(j * w + hh * hd + c)];
            }
        }
    }
    auto o = linear(att, n, w, w, blk.wo.w, nullptr);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
            x[size_t(i * w + j)] += mod[size_t(2 * w + j)] * o[size_t(i * w + j)];
    auto b2 = layernorm(x, n, w);
    std::vector<double> bmod(size_t(n * w));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
            bmod[size_t(i * w + j)] =
                b2[size_t(i * w + j)] * (1.0 + mod[size_t(4 * w + j)]) + mod[size_t(3 * w + j)];
    auto h1 = linear(bmod, n, w, hidden, blk.w1.w, &blk.b1.w);
    for (auto& hv : h1) hv = gelu_ref(hv);
    auto ffn = linear(h1, n, hidden, w, blk.w2.w, &blk.b2.w);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
            x[size_t(i * w + j)] += mod[size_t(5 * w + j)] * ffn[size_t(i * w + j)];

    auto modf = linear(sm, 1, w, 2 * w, dn.modf_w.w, &dn.modf_b.w);
    auto f = layernorm(x, n, w);
    std::vector<double> fmod(size_t(n * w));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
            fmod[size_t(i * w + j)] =
                f[size_t(i * w + j)] * (1.0 + modf[size_t(w + j)]) + modf[size_t(j)];
    auto y = linear(fmod, n, w, pd, dn.out_w.w, &dn.out_b.w);

    for (int64_t i = 0; i < n * pd; ++i) {
        CHECK(double(out[size_t(i)]) == doctest::Approx(y[size_t(i)]).epsilon(1e-9));
    }
}

TEST_CASE("denoiser gradients match central finite differences (double path)") {
    auto cfg = tiny_cfg();
    const auto x = random_tensor<double>({2, 2, 3}, 31);
    const auto z = random_tensor<double>({2, 2, 3}, 32);
    const auto h = random_tensor<double>({2, 4}, 33);

    for (uint64_t seed = 0; seed < 5; ++seed) {
        auto dn = make_denoiser<double>(cfg);
        randomize_params(dn, 500 + seed, 0.4);
        Rng trng(600 + seed);
        const double t = trng.uniform();
        Tensor<double> xt({2, 2, 3});
        for (size_t i = 0; i < xt.v.size(); ++i)
            xt[i] = (1.0 - t) * x[i] + t * z[i];

        auto loss_fn = [&](Denoiser<double>& d) {
            DenoiserCache<double> cache;
            const auto pred = denoiser_forward(d, xt, t, h, cache);
            return double(flow::fm_loss(pred, x, z));
        };

        dn.zero_grads();
        DenoiserCache<double> cache;
        const auto pred = denoiser_forward(dn, xt, t, h, cache);
        Tensor<double> dpred;
        const double loss = double(flow::fm_loss_backward(pred, x, z, dpred));
        CHECK(std::isfinite(loss));
        denoiser_backward(dn, cache, dpred);

        const double fd_step = 1e-5;
        int64_t checked = 0;
        dn.for_each_param([&](const std::string& name, Param<double>& p) {
            for (size_t i = 0; i < p.w.v.size(); ++i) {
                const double keep = p.w[i];
                p.w[i] = keep + fd_step;
                const double lp = loss_fn(dn);
                p.w[i] = keep - fd_step;
                const double lm = loss_fn(dn);
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
        CHECK(checked > 500);
    }
}

TEST_CASE("condition-path gradient flows through d(h)") {
    auto cfg = tiny_cfg();
    auto dn = make_denoiser<double>(cfg);
    randomize_params(dn, 71, 0.4);
    const auto x = random_tensor<double>({2, 2, 3}, 41);
    const auto z = random_tensor<double>({2, 2, 3}, 42);
    auto h = random_tensor<double>({3, 4}, 43);
    const double t = 0.6;
    Tensor<double> xt({2, 2, 3});
    for (size_t i = 0; i < xt.v.size(); ++i) xt[i] = (1.0 - t) * x[i] + t * z[i];

    dn.zero_grads();
    DenoiserCache<double> cache;
    const auto pred = denoiser_forward(dn, xt, t, h, cache);
    Tensor<double> dpred;
    flow::fm_loss_backward(pred, x, z, dpred);
    const auto dh = denoiser_backward(dn, cache, dpred);
    REQUIRE(dh.shape == h.shape);

    const double fd_step = 1e-5;
    for (size_t i = 0; i < h.v.size(); ++i) {
        const double keep = h[i];
        auto eval = [&](double v) {
            h[i] = v;
            DenoiserCache<double> c;
            const auto p = denoiser_forward(dn, xt, t, h, c);
            return double(flow::fm_loss(p, x, z));
        };
        const double lp = eval(keep + fd_step);
        const double lm = eval(keep - fd_step);
        h[i] = keep;
        const double fd = (lp - lm) / (2 * fd_step);
        const double denom = std::max({1e-8, std::abs(fd), std::abs(dh[i])});
        CHECK(std::abs(fd - dh[i]) / denom <= 1e-6);
    }
}

TEST_CASE("non-finite activations name the block") {
    auto cfg = tiny_cfg();
    auto dn = make_denoiser<float>(cfg);
    randomize_params(dn, 81, 0.4);
    Tensor<float> xt({2, 2, 3});
    xt.fill(std::numeric_limits<float>::infinity());
    const auto h = random_tensor<float>({2, 4}, 82);
    DenoiserCache<float> cache;
    try {
        denoiser_forward(dn, xt, 0.5f, h, cache);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("block 0") != std::string::npos);
    }
}

TEST_SUITE_END();
