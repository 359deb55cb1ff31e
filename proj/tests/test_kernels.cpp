// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar-vs-SIMD equivalence for every dispatched kernel. Elementwise ops
// must match bitwise; reductions may differ by reassociation only.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "centermask/kernels.hpp"

namespace k = centermask::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (float& x : v) x = dist(rng);
    return v;
}

const std::vector<std::size_t> kLengths = {0, 1, 3, 7, 8, 9, 15, 16, 31, 32, 33, 100, 255, 1024, 4097};

struct Variant {
    const char* name;
    float (*dot)(const float*, const float*, std::size_t);
    void (*dot4)(const float*, const float*, std::size_t, std::size_t, float*);
    void (*axpy)(float, const float*, float*, std::size_t);
    void (*vadd)(const float*, const float*, float*, std::size_t);
    void (*vmul)(const float*, const float*, float*, std::size_t);
    void (*vscale)(const float*, float, float*, std::size_t);
    float (*vsum)(const float*, std::size_t);
    void (*relu)(const float*, float*, std::size_t);
    void (*relu_bwd)(const float*, const float*, float*, std::size_t);
};

std::vector<Variant> simd_variants() {
    std::vector<Variant> out;
#if defined(__x86_64__) || defined(_M_X64)
    if (k::cpu_has_avx2())
        out.push_back({"avx2", k::avx2::dot, k::avx2::dot4, k::avx2::axpy, k::avx2::vadd,
                       k::avx2::vmul, k::avx2::vscale, k::avx2::vsum, k::avx2::relu,
                       k::avx2::relu_bwd});
#endif
#if defined(__aarch64__) || defined(__ARM_NEON)
    out.push_back({"neon", k::neon::dot, k::neon::dot4, k::neon::axpy, k::neon::vadd,
                   k::neon::vmul, k::neon::vscale, k::neon::vsum, k::neon::relu,
                   k::neon::relu_bwd});
#endif
    return out;
}

}  // namespace

TEST_CASE("reductions match scalar reference within reassociation tolerance") {
    for (const Variant& v : simd_variants()) {
        CAPTURE(v.name);
        for (std::size_t n : kLengths) {
            auto a = random_vec(n, 11 + static_cast<std::uint32_t>(n));
            auto b = random_vec(n, 23 + static_cast<std::uint32_t>(n));
            const float ref = k::scalar::dot(a.data(), b.data(), n);
            const float got = v.dot(a.data(), b.data(), n);
            CHECK(std::abs(ref - got) <= 1e-5f * (1.0f + std::abs(ref)));

            const float sref = k::scalar::vsum(a.data(), n);
            const float sgot = v.vsum(a.data(), n);
            CHECK(std::abs(sref - sgot) <= 1e-5f * (1.0f + std::abs(sref)));
        }
    }
}

TEST_CASE("dot4 equals four independent dots") {
    for (const Variant& v : simd_variants()) {
        CAPTURE(v.name);
        for (std::size_t n : kLengths) {
            if (n == 0) continue;
            auto a = random_vec(n, 31);
            auto b = random_vec(4 * n, 37);
            float got[4];
            v.dot4(a.data(), b.data(), n, n, got);
            for (int j = 0; j < 4; ++j) {
                const float ref = k::scalar::dot(a.data(), b.data() + static_cast<std::size_t>(j) * n, n);
                CHECK(std::abs(ref - got[j]) <= 1e-5f * (1.0f + std::abs(ref)));
            }
        }
    }
}

TEST_CASE("elementwise kernels match scalar reference exactly") {
    for (const Variant& v : simd_variants()) {
        CAPTURE(v.name);
        for (std::size_t n : kLengths) {
            auto a = random_vec(n, 41);
            auto b = random_vec(n, 43);
            std::vector<float> r1(n), r2(n);

            v.vadd(a.data(), b.data(), r1.data(), n);
            k::scalar::vadd(a.data(), b.data(), r2.data(), n);
            CHECK(r1 == r2);

            v.vmul(a.data(), b.data(), r1.data(), n);
            k::scalar::vmul(a.data(), b.data(), r2.data(), n);
            CHECK(r1 == r2);

            v.vscale(a.data(), 0.37f, r1.data(), n);
            k::scalar::vscale(a.data(), 0.37f, r2.data(), n);
            CHECK(r1 == r2);

            v.relu(a.data(), r1.data(), n);
            k::scalar::relu(a.data(), r2.data(), n);
            CHECK(r1 == r2);

            // axpy fuses multiply-add on SIMD targets: bounded by one
            // rounding of the product per element, not bitwise.
            std::vector<float> y1 = b, y2 = b;
            v.axpy(0.73f, a.data(), y1.data(), n);
            k::scalar::axpy(0.73f, a.data(), y2.data(), n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(std::abs(y1[i] - y2[i]) <= 1e-6f * (1.0f + std::abs(y2[i])));

            std::vector<float> d1 = b, d2 = b;
            v.relu_bwd(a.data(), b.data(), d1.data(), n);
            k::scalar::relu_bwd(a.data(), b.data(), d2.data(), n);
            CHECK(d1 == d2);
        }
    }
}

TEST_CASE("isa selection is explicit and reversible") {
    const std::string before = k::active_isa();
    k::select_isa("scalar");
    CHECK(k::active_isa() == "scalar");
    CHECK(k::dot == k::scalar::dot);
    CHECK_THROWS(k::select_isa("no-such-isa"));
#if defined(__x86_64__) || defined(_M_X64)
    if (k::cpu_has_avx2()) {
        k::select_isa("avx2");
        CHECK(k::active_isa() == "avx2");
    }
#endif
    k::select_isa(before);
}
