#include <doctest.h>

#include <cmath>
#include <random>

#include "iomm/binio.hpp"
#include "iomm/linalg.hpp"
#include "iomm/rng.hpp"
#include "iomm/sha256.hpp"
#include "iomm/tensor.hpp"

using namespace iomm;

TEST_SUITE_BEGIN("util");

TEST_CASE("sha256 matches FIPS test vectors") {
    CHECK(sha256_hex(std::string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // Incremental = one-shot across a block boundary.
    Sha256 h;
    const std::string part1(100, 'x'), part2(29, 'x');
    h.update(part1.data(), part1.size());
    h.update(part2.data(), part2.size());
    const auto digest = h.finish();
    std::string hex;
    for (const auto b : digest) {
        static const char* k = "0123456789abcdef";
        hex += k[b >> 4];
        hex += k[b & 0xf];
    }
    CHECK(hex == sha256_hex(std::string(129, 'x')));
}

TEST_CASE("rng stream follows the documented recipe") {
    Rng a(42);
    std::mt19937_64 reference(42);
    for (int i = 0; i < 16; ++i) {
        CHECK(a.next_u64() == reference());
    }
    Rng b(42);
    std::mt19937_64 ref2(42);
    for (int i = 0; i < 8; ++i) {
        const double u = b.uniform();
        const double expect = double(ref2() >> 11) * 0x1.0p-53;
        CHECK(u == expect);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("rng normal is Box-Muller on the uniform stream") {
    Rng a(7);
    std::mt19937_64 ref(7);
    auto uniform = [&] { return double(ref() >> 11) * 0x1.0p-53; };
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double pi = 3.14159265358979323846;
    CHECK(a.normal() == doctest::Approx(r * std::cos(2 * pi * u2)).epsilon(1e-12));
    CHECK(a.normal() == doctest::Approx(r * std::sin(2 * pi * u2)).epsilon(1e-12));
}

TEST_CASE("rng state save/load resumes bit-identically") {
    Rng a(123);
    for (int i = 0; i < 5; ++i) a.normal();  // leaves a cached variate
    const std::string cursor = a.save_state();
    Rng b(0);
    b.load_state(cursor);
    for (int i = 0; i < 64; ++i) {
        CHECK(a.normal() == b.normal());
        CHECK(a.next_u64() == b.next_u64());
    }
}

TEST_CASE("derive_seed splits streams") {
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(5, 9) == derive_seed(5, 9));
}

TEST_CASE("gemm agrees with a naive triple loop") {
    std::mt19937_64 gen(3);
    auto u = [&] { return double(gen() >> 11) * 0x1.0p-53 - 0.5; };
    const int64_t m = 7, n = 5, k = 9;
    std::vector<double> a(size_t(m * k)), b(size_t(k * n)), c(size_t(m * n), 0.1);
    for (auto& x : a) x = u();
    for (auto& x : b) x = u();
    std::vector<double> expect = c;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.5 * expect[size_t(i * n + j)];
            for (int64_t p = 0; p < k; ++p)
                acc += 2.0 * a[size_t(i * k + p)] * b[size_t(p * n + j)];
            expect[size_t(i * n + j)] = acc;
        }
    gemm(false, false, m, n, k, 2.0, a.data(), k, b.data(), n, 0.5, c.data(), n);
    for (size_t i = 0; i < c.size(); ++i) {
        CHECK(c[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }

    // Transposed A against the plain layout.
    std::vector<double> at(size_t(k * m));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) at[size_t(p * m + i)] = a[size_t(i * k + p)];
    std::vector<double> c2(size_t(m * n), 0.0);
    gemm(true, false, m, n, k, 1.0, at.data(), m, b.data(), n, 0.0, c2.data(), n);
    std::vector<double> c3(size_t(m * n), 0.0);
    gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, c3.data(), n);
    for (size_t i = 0; i < c2.size(); ++i)
        CHECK(c2[i] == doctest::Approx(c3[i]).epsilon(1e-12));
}

TEST_CASE("byte reader round-trips and reports truncation offsets") {
    std::string blob;
    put_u16le(blob, 0xbeef);
    put_u32le(blob, 0xdeadbeef);
    put_f32le(blob, -1.5f);
    put_f64le(blob, 3.25);
    ByteReader r(blob, "blob");
    CHECK(r.u16() == 0xbeef);
    CHECK(r.u32() == 0xdeadbeef);
    CHECK(r.f32() == -1.5f);
    CHECK(r.f64() == 3.25);
    CHECK(r.done());
    ByteReader r2(blob, "blob");
    r2.pos = blob.size() - 1;
    CHECK_THROWS_AS(r2.u32(), FormatError);
}

TEST_CASE("tensor shape checks") {
    Tensor<float> a({2, 3});
    Tensor<float> b({3, 2});
    CHECK(a.numel() == 6);
    CHECK_THROWS_AS(require_same_shape(a, b, "t"), ShapeError);
    CHECK(a.shape_str() == "[2, 3]");
}

TEST_SUITE_END();
