// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace centermask::kernels {

float (*dot)(const float*, const float*, std::size_t) = scalar::dot;
void (*dot4)(const float*, const float*, std::size_t, std::size_t, float*) = scalar::dot4;
void (*axpy)(float, const float*, float*, std::size_t) = scalar::axpy;
void (*vadd)(const float*, const float*, float*, std::size_t) = scalar::vadd;
void (*vmul)(const float*, const float*, float*, std::size_t) = scalar::vmul;
void (*vscale)(const float*, float, float*, std::size_t) = scalar::vscale;
float (*vsum)(const float*, std::size_t) = scalar::vsum;
void (*relu)(const float*, float*, std::size_t) = scalar::relu;
void (*relu_bwd)(const float*, const float*, float*, std::size_t) = scalar::relu_bwd;

namespace {
std::string g_active = "scalar";
}

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

bool cpu_has_neon() {
#if defined(__aarch64__) || defined(__ARM_NEON)
    return true;
#else
    return false;
#endif
}

const std::string& active_isa() { return g_active; }

void select_isa(const std::string& name) {
    if (name == "scalar") {
        dot = scalar::dot;
        dot4 = scalar::dot4;
        axpy = scalar::axpy;
        vadd = scalar::vadd;
        vmul = scalar::vmul;
        vscale = scalar::vscale;
        vsum = scalar::vsum;
        relu = scalar::relu;
        relu_bwd = scalar::relu_bwd;
        g_active = "scalar";
        return;
    }
#if defined(__x86_64__) || defined(_M_X64)
    if (name == "avx2") {
        if (!cpu_has_avx2()) throw std::invalid_argument("avx2 not supported on this CPU");
        dot = avx2::dot;
        dot4 = avx2::dot4;
        axpy = avx2::axpy;
        vadd = avx2::vadd;
        vmul = avx2::vmul;
        vscale = avx2::vscale;
        vsum = avx2::vsum;
        relu = avx2::relu;
        relu_bwd = avx2::relu_bwd;
        g_active = "avx2";
        return;
    }
#endif
#if defined(__aarch64__) || defined(__ARM_NEON)
    if (name == "neon") {
        dot = neon::dot;
        dot4 = neon::dot4;
        axpy = neon::axpy;
        vadd = neon::vadd;
        vmul = neon::vmul;
        vscale = neon::vscale;
        vsum = neon::vsum;
        relu = neon::relu;
        relu_bwd = neon::relu_bwd;
        g_active = "neon";
        return;
    }
#endif
    throw std::invalid_argument("unknown kernel ISA: " + name);
}

namespace {

struct AutoSelect {
    AutoSelect() {
        if (const char* env = std::getenv("CENTERMASK_ISA")) {
            select_isa(env);
            return;
        }
        if (cpu_has_avx2()) {
            select_isa("avx2");
        } else if (cpu_has_neon()) {
            select_isa("neon");
        }
    }
};
const AutoSelect g_auto_select;

}  // namespace

}  // namespace centermask::kernels
