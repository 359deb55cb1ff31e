// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Hot inner-loop primitives. Every kernel has a scalar reference
// implementation (ground truth) and optional SIMD variants selected once at
// startup by CPU feature detection. The dispatched entry points are plain
// function pointers so callers pay no branch per call.
//
// Float kernels are dispatched; the double-precision path (used by the
// finite-difference gradient checker) always runs the scalar reference.

#pragma once

#include <cstddef>
#include <string>
#include <type_traits>

namespace centermask::kernels {

// Portable reference loops, usable at any precision.
namespace ref {

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out[j] = dot(a, b + j*bstride) for j = 0..3; the shared a-row makes this
// the 4-wide GEMM microkernel.
template <typename T>
inline void dot4(const T* a, const T* b, std::size_t bstride, std::size_t n, T* out) {
    T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
    const T* b1 = b + bstride;
    const T* b2 = b + 2 * bstride;
    const T* b3 = b + 3 * bstride;
    for (std::size_t i = 0; i < n; ++i) {
        const T av = a[i];
        acc0 += av * b[i];
        acc1 += av * b1[i];
        acc2 += av * b2[i];
        acc3 += av * b3[i];
    }
    out[0] = acc0;
    out[1] = acc1;
    out[2] = acc2;
    out[3] = acc3;
}

template <typename T>
inline void vadd(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
inline void vmul(const T* a, const T* b, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
inline void vscale(const T* x, T alpha, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <typename T>
inline T vsum(const T* x, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <typename T>
inline void relu(const T* x, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

// dx += dy where x > 0
template <typename T>
inline void relu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
}

}  // namespace ref

// Named scalar entry points (the reference variant in the dispatch table).
namespace scalar {
float dot(const float* a, const float* b, std::size_t n);
void dot4(const float* a, const float* b, std::size_t bstride, std::size_t n, float* out);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void vadd(const float* a, const float* b, float* out, std::size_t n);
void vmul(const float* a, const float* b, float* out, std::size_t n);
void vscale(const float* x, float alpha, float* out, std::size_t n);
float vsum(const float* x, std::size_t n);
void relu(const float* x, float* out, std::size_t n);
void relu_bwd(const float* x, const float* dy, float* dx, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
void dot4(const float* a, const float* b, std::size_t bstride, std::size_t n, float* out);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void vadd(const float* a, const float* b, float* out, std::size_t n);
void vmul(const float* a, const float* b, float* out, std::size_t n);
void vscale(const float* x, float alpha, float* out, std::size_t n);
float vsum(const float* x, std::size_t n);
void relu(const float* x, float* out, std::size_t n);
void relu_bwd(const float* x, const float* dy, float* dx, std::size_t n);
}  // namespace avx2
#endif

#if defined(__aarch64__) || defined(__ARM_NEON)
namespace neon {
float dot(const float* a, const float* b, std::size_t n);
void dot4(const float* a, const float* b, std::size_t bstride, std::size_t n, float* out);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void vadd(const float* a, const float* b, float* out, std::size_t n);
void vmul(const float* a, const float* b, float* out, std::size_t n);
void vscale(const float* x, float alpha, float* out, std::size_t n);
float vsum(const float* x, std::size_t n);
void relu(const float* x, float* out, std::size_t n);
void relu_bwd(const float* x, const float* dy, float* dx, std::size_t n);
}  // namespace neon
#endif

// Dispatched float entry points. Initialized before main() and overridable
// via select_isa() or the CENTERMASK_ISA environment variable
// (scalar | avx2 | neon).
extern float (*dot)(const float*, const float*, std::size_t);
extern void (*dot4)(const float*, const float*, std::size_t, std::size_t, float*);
extern void (*axpy)(float, const float*, float*, std::size_t);
extern void (*vadd)(const float*, const float*, float*, std::size_t);
extern void (*vmul)(const float*, const float*, float*, std::size_t);
extern void (*vscale)(const float*, float, float*, std::size_t);
extern float (*vsum)(const float*, std::size_t);
extern void (*relu)(const float*, float*, std::size_t);
extern void (*relu_bwd)(const float*, const float*, float*, std::size_t);

bool cpu_has_avx2();
bool cpu_has_neon();

// Returns the name of the variant actually selected ("scalar", "avx2", ...).
const std::string& active_isa();

// Force a variant; throws std::invalid_argument if unavailable on this CPU.
void select_isa(const std::string& name);

// Precision-generic wrappers for templated callers. Float goes through the
// dispatch table, double through the reference loops.
template <typename T>
inline T vdot(const T* a, const T* b, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) return dot(a, b, n);
    else return ref::dot(a, b, n);
}
template <typename T>
inline void tdot4(const T* a, const T* b, std::size_t bstride, std::size_t n, T* out) {
    if constexpr (std::is_same_v<T, float>) dot4(a, b, bstride, n, out);
    else ref::dot4(a, b, bstride, n, out);
}
template <typename T>
inline void vaxpy(T alpha, const T* x, T* y, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) axpy(alpha, x, y, n);
    else ref::axpy(alpha, x, y, n);
}
template <typename T>
inline void tadd(const T* a, const T* b, T* out, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) vadd(a, b, out, n);
    else ref::vadd(a, b, out, n);
}
template <typename T>
inline void tmul(const T* a, const T* b, T* out, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) vmul(a, b, out, n);
    else ref::vmul(a, b, out, n);
}
template <typename T>
inline void tscale(const T* x, T alpha, T* out, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) vscale(x, alpha, out, n);
    else ref::vscale(x, alpha, out, n);
}
template <typename T>
inline T tsum(const T* x, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) return vsum(x, n);
    else return ref::vsum(x, n);
}
template <typename T>
inline void trelu(const T* x, T* out, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) relu(x, out, n);
    else ref::relu(x, out, n);
}
template <typename T>
inline void trelu_bwd(const T* x, const T* dy, T* dx, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) relu_bwd(x, dy, dx, n);
    else ref::relu_bwd(x, dy, dx, n);
}

}  // namespace centermask::kernels
