// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/kernels.hpp"

namespace centermask::kernels::scalar {

float dot(const float* a, const float* b, std::size_t n) { return ref::dot(a, b, n); }
void dot4(const float* a, const float* b, std::size_t bstride, std::size_t n, float* out) { ref::dot4(a, b, bstride, n, out); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { ref::axpy(alpha, x, y, n); }
void vadd(const float* a, const float* b, float* out, std::size_t n) { ref::vadd(a, b, out, n); }
void vmul(const float* a, const float* b, float* out, std::size_t n) { ref::vmul(a, b, out, n); }
void vscale(const float* x, float alpha, float* out, std::size_t n) { ref::vscale(x, alpha, out, n); }
float vsum(const float* x, std::size_t n) { return ref::vsum(x, n); }
void relu(const float* x, float* out, std::size_t n) { ref::relu(x, out, n); }
void relu_bwd(const float* x, const float* dy, float* dx, std::size_t n) { ref::relu_bwd(x, dy, dx, n); }

}  // namespace centermask::kernels::scalar
