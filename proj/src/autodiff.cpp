// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Operator implementations. Convolution family runs as im2col plus a blocked
// GEMM over the dot4 kernel; backward recomputes the patch matrix instead of
// keeping it alive on the tape. OpenMP loops only ever write disjoint slices
// and reduce in a fixed order, so results are bitwise reproducible at any
// thread count.

#include "centermask/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "centermask/kernels.hpp"

namespace centermask::ad {

namespace {

template <typename T>
void require(bool cond, const char* op, const std::string& msg) {
    if (!cond) throw std::invalid_argument(std::string(op) + ": " + msg);
}

void require_rank4(const std::vector<int>& s, const char* op) {
    if (s.size() != 4) throw std::invalid_argument(std::string(op) + ": expected rank-4 tensor");
}

inline int conv_extent(int in, int pad, int k, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Patch matrix: row p = output pixel (oy * outW + ox), columns (c, ky, kx)
// flattened; zero fill where the window leaves the input.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int outH, int outW, T* patches) {
    const std::size_t K = static_cast<std::size_t>(C) * kh * kw;
    for (int oy = 0; oy < outH; ++oy) {
        for (int ox = 0; ox < outW; ++ox) {
            T* row = patches + (static_cast<std::size_t>(oy) * outW + ox) * K;
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            std::size_t idx = 0;
            for (int c = 0; c < C; ++c) {
                const T* plane = x + static_cast<std::size_t>(c) * H * W;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= H) {
                        for (int kx = 0; kx < kw; ++kx) row[idx++] = T(0);
                        continue;
                    }
                    const T* line = plane + static_cast<std::size_t>(iy) * W;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ix0 + kx;
                        row[idx++] = (ix < 0 || ix >= W) ? T(0) : line[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* patches, int C, int H, int W, int kh, int kw, int stride,
                int pad, int outH, int outW, T* dx) {
    const std::size_t K = static_cast<std::size_t>(C) * kh * kw;
    for (int oy = 0; oy < outH; ++oy) {
        for (int ox = 0; ox < outW; ++ox) {
            const T* row = patches + (static_cast<std::size_t>(oy) * outW + ox) * K;
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            std::size_t idx = 0;
            for (int c = 0; c < C; ++c) {
                T* plane = dx + static_cast<std::size_t>(c) * H * W;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= H) {
                        idx += static_cast<std::size_t>(kw);
                        continue;
                    }
                    T* line = plane + static_cast<std::size_t>(iy) * W;
                    for (int kx = 0; kx < kw; ++kx, ++idx) {
                        const int ix = ix0 + kx;
                        if (ix >= 0 && ix < W) line[ix] += row[idx];
                    }
                }
            }
        }
    }
}

// out[co][p] = dot(w[co], patches[p]) + bias[co]; blocked so a block of patch
// rows stays cache-resident while weight rows stream through dot4.
template <typename T>
void gemm_patches(const T* patches, std::size_t rows, std::size_t K, const T* w,
                  std::size_t co_count, const T* bias, T* out) {
    constexpr std::size_t kBlock = 32;
    const std::size_t blocks = (rows + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
    for (std::int64_t bi = 0; bi < static_cast<std::int64_t>(blocks); ++bi) {
        const std::size_t p0 = static_cast<std::size_t>(bi) * kBlock;
        const std::size_t p1 = std::min(rows, p0 + kBlock);
        std::size_t co = 0;
        for (; co + 4 <= co_count; co += 4) {
            const T* wr = w + co * K;
            for (std::size_t p = p0; p < p1; ++p) {
                T vals[4];
                kernels::tdot4(patches + p * K, wr, K, K, vals);
                for (int j = 0; j < 4; ++j)
                    out[(co + j) * rows + p] = vals[j] + (bias ? bias[co + j] : T(0));
            }
        }
        for (; co < co_count; ++co) {
            const T* wr = w + co * K;
            for (std::size_t p = p0; p < p1; ++p)
                out[co * rows + p] = kernels::vdot(patches + p * K, wr, K) + (bias ? bias[co] : T(0));
        }
    }
}

// dpatches[p] += sum_co dy[co][p] * w[co]
template <typename T>
void gemm_patches_bwd_data(const T* dy, std::size_t rows, std::size_t K, const T* w,
                           std::size_t co_count, T* dpatches) {
    constexpr std::size_t kBlock = 32;
    const std::size_t blocks = (rows + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
    for (std::int64_t bi = 0; bi < static_cast<std::int64_t>(blocks); ++bi) {
        const std::size_t p0 = static_cast<std::size_t>(bi) * kBlock;
        const std::size_t p1 = std::min(rows, p0 + kBlock);
        for (std::size_t co = 0; co < co_count; ++co) {
            const T* wr = w + co * K;
            const T* dyr = dy + co * rows;
            for (std::size_t p = p0; p < p1; ++p) {
                const T g = dyr[p];
                if (g != T(0)) kernels::vaxpy(g, wr, dpatches + p * K, K);
            }
        }
    }
}

// dw[co] += sum_p dy[co][p] * patches[p]
template <typename T>
void gemm_patches_bwd_weight(const T* dy, const T* patches, std::size_t rows,
                             std::size_t K, std::size_t co_count, T* dw) {
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < static_cast<std::int64_t>(co_count); ++co) {
        const T* dyr = dy + static_cast<std::size_t>(co) * rows;
        T* dwr = dw + static_cast<std::size_t>(co) * K;
        for (std::size_t p = 0; p < rows; ++p) {
            const T g = dyr[p];
            if (g != T(0)) kernels::vaxpy(g, patches + p * K, dwr, K);
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Id conv2d(Tape<T>& t, Id x, Id w, Id b, int stride, int pad) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const Tensor<T>& bv = t.value(b);
    require_rank4(xv.shape(), "conv2d");
    require_rank4(wv.shape(), "conv2d");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    require<T>(wv.dim(1) == C, "conv2d", "weight input channels " + std::to_string(wv.dim(1)) +
                                              " do not match x channels " + std::to_string(C));
    require<T>(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel extents must be odd");
    require<T>(stride >= 1 && pad >= 0, "conv2d", "stride must be >= 1 and pad >= 0");
    require<T>(bv.rank() == 1 && bv.dim(0) == Co, "conv2d", "bias must have one value per output channel");
    const int outH = conv_extent(H, pad, kh, stride);
    const int outW = conv_extent(W, pad, kw, stride);
    require<T>(outH >= 1 && outW >= 1, "conv2d", "output would be empty");

    const std::size_t K = static_cast<std::size_t>(C) * kh * kw;
    const std::size_t rows = static_cast<std::size_t>(outH) * outW;
    Tensor<T> out({N, Co, outH, outW});
    std::vector<T> patches(rows * K);
    for (int n = 0; n < N; ++n) {
        im2col(xv.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw,
               stride, pad, outH, outW, patches.data());
        gemm_patches(patches.data(), rows, K, wv.data(), static_cast<std::size_t>(Co),
                     bv.data(), out.data() + static_cast<std::size_t>(n) * Co * rows);
    }

    auto bwd = [x, w, b, stride, pad, N, C, H, W, Co, kh, kw, outH, outW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(w);
        Tensor<T>& dx = tp.grad_buffer(x);
        Tensor<T>& dw = tp.grad_buffer(w);
        Tensor<T>& db = tp.grad_buffer(b);
        const std::size_t K = static_cast<std::size_t>(C) * kh * kw;
        const std::size_t rows = static_cast<std::size_t>(outH) * outW;
        std::vector<T> patches(rows * K);
        std::vector<T> dpatches(rows * K);
        for (int n = 0; n < N; ++n) {
            const T* dyn = dy.data() + static_cast<std::size_t>(n) * Co * rows;
            im2col(xv2.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw,
                   stride, pad, outH, outW, patches.data());
            gemm_patches_bwd_weight(dyn, patches.data(), rows, K,
                                    static_cast<std::size_t>(Co), dw.data());
            std::fill(dpatches.begin(), dpatches.end(), T(0));
            gemm_patches_bwd_data(dyn, rows, K, wv2.data(), static_cast<std::size_t>(Co),
                                  dpatches.data());
            col2im_add(dpatches.data(), C, H, W, kh, kw, stride, pad, outH, outW,
                       dx.data() + static_cast<std::size_t>(n) * C * H * W);
            for (int co = 0; co < Co; ++co)
                db[co] += kernels::tsum(dyn + static_cast<std::size_t>(co) * rows, rows);
        }
    };
    return t.emit(std::move(out), {x, w, b}, bwd, "conv2d");
}

// ---------------------------------------------------------------------------
// deconv2d_2x2: stride-2 transposed conv; output pixels are written exactly
// once, so it decomposes into four 1x1 GEMMs on a transposed input.

template <typename T>
Id deconv2d_2x2(Tape<T>& t, Id x, Id w, Id b) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const Tensor<T>& bv = t.value(b);
    require_rank4(xv.shape(), "deconv2d_2x2");
    require_rank4(wv.shape(), "deconv2d_2x2");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    require<T>(wv.dim(0) == C && wv.dim(2) == 2 && wv.dim(3) == 2, "deconv2d_2x2",
               "weight must be C x C' x 2 x 2 with C matching the input");
    const int Co = wv.dim(1);
    require<T>(bv.rank() == 1 && bv.dim(0) == Co, "deconv2d_2x2", "bias size mismatch");

    const std::size_t HW = static_cast<std::size_t>(H) * W;
    // xT rows: pixel-major, length C. wT[tap]: Co rows of length C.
    std::vector<T> xT(static_cast<std::size_t>(N) * HW * C);
    for (int n = 0; n < N; ++n) {
        const T* xn = xv.data() + static_cast<std::size_t>(n) * C * HW;
        T* rowbase = xT.data() + static_cast<std::size_t>(n) * HW * C;
        for (int c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) rowbase[p * C + c] = xn[c * HW + p];
    }
    std::vector<T> wT(4u * Co * C);
    for (int c = 0; c < C; ++c)
        for (int co = 0; co < Co; ++co)
            for (int tap = 0; tap < 4; ++tap)
                wT[(static_cast<std::size_t>(tap) * Co + co) * C + c] =
                    wv[((static_cast<std::size_t>(c) * Co + co) * 2 + tap / 2) * 2 + tap % 2];

    Tensor<T> out({N, Co, 2 * H, 2 * W});
    const int oW = 2 * W;
    const T* bias = bv.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t co = 0; co < Co; ++co) {
        for (int n = 0; n < N; ++n) {
            const T* rowbase = xT.data() + static_cast<std::size_t>(n) * HW * C;
            T* on = out.data() + ((static_cast<std::size_t>(n) * Co + co) * 4 * HW);
            for (int tap = 0; tap < 4; ++tap) {
                const T* wr = wT.data() + (static_cast<std::size_t>(tap) * Co + co) * C;
                const int ky = tap / 2, kx = tap % 2;
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix) {
                        const T v = kernels::vdot(rowbase + (static_cast<std::size_t>(iy) * W + ix) * C,
                                                  wr, static_cast<std::size_t>(C));
                        on[static_cast<std::size_t>(2 * iy + ky) * oW + (2 * ix + kx)] =
                            v + bias[co];
                    }
            }
        }
    }

    auto bwd = [x, w, b, N, C, H, W, Co](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(w);
        Tensor<T>& dx = tp.grad_buffer(x);
        Tensor<T>& dw = tp.grad_buffer(w);
        Tensor<T>& db = tp.grad_buffer(b);
        const std::size_t HW = static_cast<std::size_t>(H) * W;
        const int oW = 2 * W;
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Co; ++co) {
                const T* dyn = dy.data() + (static_cast<std::size_t>(n) * Co + co) * 4 * HW;
                for (int tap = 0; tap < 4; ++tap) {
                    const int ky = tap / 2, kx = tap % 2;
                    for (int iy = 0; iy < H; ++iy)
                        for (int ix = 0; ix < W; ++ix) {
                            const T g = dyn[static_cast<std::size_t>(2 * iy + ky) * oW + (2 * ix + kx)];
                            if (g == T(0)) continue;
                            db[co] += g;
                            const std::size_t p = static_cast<std::size_t>(iy) * W + ix;
                            for (int c = 0; c < C; ++c) {
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(c) * Co + co) * 2 + ky) * 2 + kx;
                                dx[(static_cast<std::size_t>(n) * C + c) * HW + p] += g * wv2[wi];
                                dw[wi] += g * xv2[(static_cast<std::size_t>(n) * C + c) * HW + p];
                            }
                        }
                }
            }
        }
    };
    return t.emit(std::move(out), {x, w, b}, bwd, "deconv2d_2x2");
}

// ---------------------------------------------------------------------------
// fully_connected

template <typename T>
Id fully_connected(Tape<T>& t, Id x, Id w, Id b) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const Tensor<T>& bv = t.value(b);
    require<T>(xv.rank() == 2 && wv.rank() == 2, "fully_connected", "x and w must be rank 2");
    const int N = xv.dim(0), C = xv.dim(1), Co = wv.dim(0);
    require<T>(wv.dim(1) == C, "fully_connected",
               "inner extents disagree: x has " + std::to_string(C) + ", w has " +
                   std::to_string(wv.dim(1)));
    require<T>(bv.rank() == 1 && bv.dim(0) == Co, "fully_connected", "bias size mismatch");

    Tensor<T> out({N, Co});
    for (int n = 0; n < N; ++n) {
        const T* xr = xv.data() + static_cast<std::size_t>(n) * C;
        T* or_ = out.data() + static_cast<std::size_t>(n) * Co;
        int co = 0;
        for (; co + 4 <= Co; co += 4) {
            T vals[4];
            kernels::tdot4(xr, wv.data() + static_cast<std::size_t>(co) * C,
                           static_cast<std::size_t>(C), static_cast<std::size_t>(C), vals);
            for (int j = 0; j < 4; ++j) or_[co + j] = vals[j] + bv[co + j];
        }
        for (; co < Co; ++co)
            or_[co] = kernels::vdot(xr, wv.data() + static_cast<std::size_t>(co) * C,
                                    static_cast<std::size_t>(C)) +
                      bv[co];
    }

    auto bwd = [x, w, b, N, C, Co](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(w);
        Tensor<T>& dx = tp.grad_buffer(x);
        Tensor<T>& dw = tp.grad_buffer(w);
        Tensor<T>& db = tp.grad_buffer(b);
        for (int n = 0; n < N; ++n) {
            const T* dyr = dy.data() + static_cast<std::size_t>(n) * Co;
            const T* xr = xv2.data() + static_cast<std::size_t>(n) * C;
            T* dxr = dx.data() + static_cast<std::size_t>(n) * C;
            for (int co = 0; co < Co; ++co) {
                const T g = dyr[co];
                if (g == T(0)) continue;
                kernels::vaxpy(g, wv2.data() + static_cast<std::size_t>(co) * C, dxr,
                               static_cast<std::size_t>(C));
                kernels::vaxpy(g, xr, dw.data() + static_cast<std::size_t>(co) * C,
                               static_cast<std::size_t>(C));
                db[co] += g;
            }
        }
    };
    return t.emit(std::move(out), {x, w, b}, bwd, "fully_connected");
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
T sigmoid_scalar(T v) {
    if (v >= T(0)) {
        const T e = std::exp(-v);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Id activation(Tape<T>& t, Id x, Activation kind) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out(xv.shape());
    const std::size_t n = static_cast<std::size_t>(xv.size());
    if (kind == Activation::kRelu) {
        kernels::trelu(xv.data(), out.data(), n);
        auto bwd = [x](Tape<T>& tp, Id self) {
            const Tensor<T>& dy = tp.grad(self);
            kernels::trelu_bwd(tp.value(x).data(), dy.data(), tp.grad_buffer(x).data(),
                               static_cast<std::size_t>(dy.size()));
        };
        return t.emit(std::move(out), {x}, bwd, "relu");
    }
    for (std::size_t i = 0; i < n; ++i) out[static_cast<std::int64_t>(i)] = sigmoid_scalar(xv[static_cast<std::int64_t>(i)]);
    auto bwd = [x](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& y = tp.value(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    };
    return t.emit(std::move(out), {x}, bwd, "sigmoid");
}

template <typename T>
Id exp_clamped(Tape<T>& t, Id x, T limit) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = std::exp(std::min(xv[i], limit));
    auto bwd = [x, limit](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& y = tp.value(self);
        const Tensor<T>& xv2 = tp.value(x);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::int64_t i = 0; i < dy.size(); ++i)
            if (xv2[i] < limit) dx[i] += dy[i] * y[i];
    };
    return t.emit(std::move(out), {x}, bwd, "exp_clamped");
}

template <typename T>
Id mul_scalar_param(Tape<T>& t, Id x, Id s) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& sv = t.value(s);
    require<T>(sv.size() == 1, "mul_scalar_param", "scale must hold exactly one value");
    Tensor<T> out(xv.shape());
    kernels::tscale(xv.data(), sv[0], out.data(), static_cast<std::size_t>(xv.size()));
    auto bwd = [x, s](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const T sval = tp.value(s)[0];
        kernels::vaxpy(sval, dy.data(), tp.grad_buffer(x).data(),
                       static_cast<std::size_t>(dy.size()));
        tp.grad_buffer(s)[0] +=
            kernels::vdot(dy.data(), xv2.data(), static_cast<std::size_t>(dy.size()));
    };
    return t.emit(std::move(out), {x, s}, bwd, "mul_scalar_param");
}

template <typename T>
Id add(Tape<T>& t, Id a, Id b) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    require<T>(av.same_shape(bv), "add",
               "shape mismatch " + shape_to_string(av.shape()) + " vs " + shape_to_string(bv.shape()));
    Tensor<T> out(av.shape());
    kernels::tadd(av.data(), bv.data(), out.data(), static_cast<std::size_t>(av.size()));
    auto bwd = [a, b](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        kernels::vaxpy(T(1), dy.data(), tp.grad_buffer(a).data(), static_cast<std::size_t>(dy.size()));
        kernels::vaxpy(T(1), dy.data(), tp.grad_buffer(b).data(), static_cast<std::size_t>(dy.size()));
    };
    return t.emit(std::move(out), {a, b}, bwd, "add");
}

template <typename T>
Id mul(Tape<T>& t, Id a, Id b) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    require<T>(av.same_shape(bv), "mul", "shape mismatch");
    Tensor<T> out(av.shape());
    kernels::tmul(av.data(), bv.data(), out.data(), static_cast<std::size_t>(av.size()));
    auto bwd = [a, b](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& av2 = tp.value(a);
        const Tensor<T>& bv2 = tp.value(b);
        Tensor<T>& da = tp.grad_buffer(a);
        Tensor<T>& db = tp.grad_buffer(b);
        for (std::int64_t i = 0; i < dy.size(); ++i) {
            da[i] += dy[i] * bv2[i];
            db[i] += dy[i] * av2[i];
        }
    };
    return t.emit(std::move(out), {a, b}, bwd, "mul");
}

template <typename T>
Id mul_channel_gate(Tape<T>& t, Id x, Id gate) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& gv = t.value(gate);
    require_rank4(xv.shape(), "mul_channel_gate");
    require<T>(gv.rank() == 4 && gv.dim(0) == xv.dim(0) && gv.dim(1) == xv.dim(1) &&
                   gv.dim(2) == 1 && gv.dim(3) == 1,
               "mul_channel_gate", "gate must be N x C x 1 x 1");
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t HW = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor<T> out(xv.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            kernels::tscale(xv.data() + off, gv[static_cast<std::int64_t>(n) * C + c],
                            out.data() + off, HW);
        }
    auto bwd = [x, gate, N, C, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& gv2 = tp.value(gate);
        Tensor<T>& dx = tp.grad_buffer(x);
        Tensor<T>& dg = tp.grad_buffer(gate);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
                kernels::vaxpy(gv2[static_cast<std::int64_t>(n) * C + c], dy.data() + off,
                               dx.data() + off, HW);
                dg[static_cast<std::int64_t>(n) * C + c] +=
                    kernels::vdot(dy.data() + off, xv2.data() + off, HW);
            }
    };
    return t.emit(std::move(out), {x, gate}, bwd, "mul_channel_gate");
}

template <typename T>
Id mul_spatial_gate(Tape<T>& t, Id x, Id gate) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& gv = t.value(gate);
    require_rank4(xv.shape(), "mul_spatial_gate");
    require<T>(gv.rank() == 4 && gv.dim(0) == xv.dim(0) && gv.dim(1) == 1 &&
                   gv.dim(2) == xv.dim(2) && gv.dim(3) == xv.dim(3),
               "mul_spatial_gate", "gate must be N x 1 x H x W");
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t HW = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor<T> out(xv.shape());
    for (int n = 0; n < N; ++n) {
        const T* g = gv.data() + static_cast<std::size_t>(n) * HW;
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            kernels::tmul(xv.data() + off, g, out.data() + off, HW);
        }
    }
    auto bwd = [x, gate, N, C, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& gv2 = tp.value(gate);
        Tensor<T>& dx = tp.grad_buffer(x);
        Tensor<T>& dg = tp.grad_buffer(gate);
        for (int n = 0; n < N; ++n) {
            const T* g = gv2.data() + static_cast<std::size_t>(n) * HW;
            T* dgn = dg.data() + static_cast<std::size_t>(n) * HW;
            for (int c = 0; c < C; ++c) {
                const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
                const T* dyr = dy.data() + off;
                const T* xr = xv2.data() + off;
                T* dxr = dx.data() + off;
                for (std::size_t i = 0; i < HW; ++i) {
                    dxr[i] += dyr[i] * g[i];
                    dgn[i] += dyr[i] * xr[i];
                }
            }
        }
    };
    return t.emit(std::move(out), {x, gate}, bwd, "mul_spatial_gate");
}

// ---------------------------------------------------------------------------
// shape / channel plumbing

template <typename T>
Id concat_channels(Tape<T>& t, const std::vector<Id>& xs) {
    require<T>(!xs.empty(), "concat_channels", "needs at least one input");
    const Tensor<T>& first = t.value(xs[0]);
    require_rank4(first.shape(), "concat_channels");
    const int N = first.dim(0), H = first.dim(2), W = first.dim(3);
    int Ctotal = 0;
    for (Id id : xs) {
        const Tensor<T>& v = t.value(id);
        require<T>(v.rank() == 4 && v.dim(0) == N && v.dim(2) == H && v.dim(3) == W,
                   "concat_channels", "all inputs must share N, H, W");
        Ctotal += v.dim(1);
    }
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, Ctotal, H, W});
    for (int n = 0; n < N; ++n) {
        std::size_t coff = 0;
        for (Id id : xs) {
            const Tensor<T>& v = t.value(id);
            const std::size_t block = static_cast<std::size_t>(v.dim(1)) * HW;
            std::memcpy(out.data() + (static_cast<std::size_t>(n) * Ctotal) * HW + coff,
                        v.data() + static_cast<std::size_t>(n) * block, block * sizeof(T));
            coff += block;
        }
    }
    auto bwd = [xs, N, Ctotal, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        for (int n = 0; n < N; ++n) {
            std::size_t coff = 0;
            for (Id id : xs) {
                Tensor<T>& dx = tp.grad_buffer(id);
                const std::size_t block = static_cast<std::size_t>(dx.shape()[1]) * HW;
                kernels::vaxpy(T(1), dy.data() + static_cast<std::size_t>(n) * Ctotal * HW + coff,
                               dx.data() + static_cast<std::size_t>(n) * block, block);
                coff += block;
            }
        }
    };
    std::vector<Id> inputs = xs;
    return t.emit(std::move(out), std::move(inputs), bwd, "concat_channels");
}

template <typename T>
Id reduce_channel(Tape<T>& t, Id x, ReduceMode mode) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "reduce_channel");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, 1, H, W});
    if (mode == ReduceMode::kAvg) {
        const T inv = T(1) / static_cast<T>(C);
        for (int n = 0; n < N; ++n) {
            T* o = out.data() + static_cast<std::size_t>(n) * HW;
            const T* base = xv.data() + static_cast<std::size_t>(n) * C * HW;
            for (std::size_t p = 0; p < HW; ++p) {
                T acc = T(0);
                for (int c = 0; c < C; ++c) acc += base[static_cast<std::size_t>(c) * HW + p];
                o[p] = acc * inv;
            }
        }
        auto bwd = [x, N, C, HW](Tape<T>& tp, Id self) {
            const Tensor<T>& dy = tp.grad(self);
            Tensor<T>& dx = tp.grad_buffer(x);
            const T inv = T(1) / static_cast<T>(C);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    kernels::vaxpy(inv, dy.data() + static_cast<std::size_t>(n) * HW,
                                   dx.data() + (static_cast<std::size_t>(n) * C + c) * HW, HW);
        };
        return t.emit(std::move(out), {x}, bwd, "reduce_channel_avg");
    }
    // max: gradient routes to the lowest argmax channel.
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(N) * HW);
    for (int n = 0; n < N; ++n) {
        T* o = out.data() + static_cast<std::size_t>(n) * HW;
        const T* base = xv.data() + static_cast<std::size_t>(n) * C * HW;
        for (std::size_t p = 0; p < HW; ++p) {
            T best = base[p];
            int bestc = 0;
            for (int c = 1; c < C; ++c) {
                const T v = base[static_cast<std::size_t>(c) * HW + p];
                if (v > best) {
                    best = v;
                    bestc = c;
                }
            }
            o[p] = best;
            (*argmax)[static_cast<std::size_t>(n) * HW + p] = bestc;
        }
    }
    auto bwd = [x, N, C, HW, argmax](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (int n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
                const int c = (*argmax)[static_cast<std::size_t>(n) * HW + p];
                dx[(static_cast<std::int64_t>(n) * C + c) * static_cast<std::int64_t>(HW) +
                   static_cast<std::int64_t>(p)] += dy[static_cast<std::int64_t>(n) * static_cast<std::int64_t>(HW) + static_cast<std::int64_t>(p)];
            }
    };
    return t.emit(std::move(out), {x}, bwd, "reduce_channel_max");
}

template <typename T>
Id global_avg_pool(Tape<T>& t, Id x) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "global_avg_pool");
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t HW = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor<T> out({N, C, 1, 1});
    const T inv = T(1) / static_cast<T>(HW);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            out[static_cast<std::int64_t>(n) * C + c] =
                kernels::tsum(xv.data() + (static_cast<std::size_t>(n) * C + c) * HW, HW) * inv;
    auto bwd = [x, N, C, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        const T inv = T(1) / static_cast<T>(HW);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T g = dy[static_cast<std::int64_t>(n) * C + c] * inv;
                T* dxr = dx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                for (std::size_t p = 0; p < HW; ++p) dxr[p] += g;
            }
    };
    return t.emit(std::move(out), {x}, bwd, "global_avg_pool");
}

template <typename T>
Id maxpool2d(Tape<T>& t, Id x, int kernel, int stride, int pad) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "maxpool2d");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int outH = conv_extent(H, pad, kernel, stride);
    const int outW = conv_extent(W, pad, kernel, stride);
    require<T>(outH >= 1 && outW >= 1, "maxpool2d", "output would be empty");
    Tensor<T> out({N, C, outH, outW});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(
        static_cast<std::size_t>(out.size()));
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    const std::size_t oHW = static_cast<std::size_t>(outH) * outW;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* plane = xv.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            T* oplane = out.data() + (static_cast<std::size_t>(n) * C + c) * oHW;
            std::int32_t* aplane = argmax->data() + (static_cast<std::size_t>(n) * C + c) * oHW;
            for (int oy = 0; oy < outH; ++oy)
                for (int ox = 0; ox < outW; ++ox) {
                    T best = T(0);
                    std::int32_t besti = -1;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            const T v = plane[static_cast<std::size_t>(iy) * W + ix];
                            if (besti < 0 || v > best) {
                                best = v;
                                besti = static_cast<std::int32_t>(iy * W + ix);
                            }
                        }
                    }
                    oplane[static_cast<std::size_t>(oy) * outW + ox] = best;
                    aplane[static_cast<std::size_t>(oy) * outW + ox] = besti;
                }
        }
    auto bwd = [x, N, C, HW, oHW, argmax](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t ooff = (static_cast<std::size_t>(n) * C + c) * oHW;
                const std::size_t ioff = (static_cast<std::size_t>(n) * C + c) * HW;
                for (std::size_t p = 0; p < oHW; ++p) {
                    const std::int32_t a = (*argmax)[ooff + p];
                    if (a >= 0) dx[static_cast<std::int64_t>(ioff + a)] += dy[static_cast<std::int64_t>(ooff + p)];
                }
            }
    };
    return t.emit(std::move(out), {x}, bwd, "maxpool2d");
}

template <typename T>
Id upsample_nearest2x(Tape<T>& t, Id x) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "upsample_nearest2x");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out({N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const T* plane = xv.data() + static_cast<std::size_t>(nc) * H * W;
        T* oplane = out.data() + static_cast<std::size_t>(nc) * 4 * H * W;
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
                const T v = plane[static_cast<std::size_t>(y) * W + x2];
                T* o = oplane + static_cast<std::size_t>(2 * y) * 2 * W + 2 * x2;
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
    }
    auto bwd = [x, N, C, H, W](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (int nc = 0; nc < N * C; ++nc) {
            const T* dplane = dy.data() + static_cast<std::size_t>(nc) * 4 * H * W;
            T* dxp = dx.data() + static_cast<std::size_t>(nc) * H * W;
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) {
                    const T* o = dplane + static_cast<std::size_t>(2 * y) * 2 * W + 2 * x2;
                    dxp[static_cast<std::size_t>(y) * W + x2] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
                }
        }
    };
    return t.emit(std::move(out), {x}, bwd, "upsample_nearest2x");
}

template <typename T>
Id reshape(Tape<T>& t, Id x, std::vector<int> new_shape) {
    const Tensor<T>& xv = t.value(x);
    require<T>(Tensor<T>::count(new_shape) == xv.size(), "reshape", "element count must not change");
    Tensor<T> out(new_shape, std::vector<T>(xv.data(), xv.data() + xv.size()));
    auto bwd = [x](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        kernels::vaxpy(T(1), dy.data(), tp.grad_buffer(x).data(), static_cast<std::size_t>(dy.size()));
    };
    return t.emit(std::move(out), {x}, bwd, "reshape");
}

template <typename T>
Id nchw_to_rows(Tape<T>& t, Id x) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "nchw_to_rows");
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t HW = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor<T> out({static_cast<int>(N * HW), C});
    for (int n = 0; n < N; ++n) {
        const T* base = xv.data() + static_cast<std::size_t>(n) * C * HW;
        T* rowbase = out.data() + static_cast<std::size_t>(n) * HW * C;
        for (int c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) rowbase[p * C + c] = base[static_cast<std::size_t>(c) * HW + p];
    }
    auto bwd = [x, N, C, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (int n = 0; n < N; ++n) {
            const T* rowbase = dy.data() + static_cast<std::size_t>(n) * HW * C;
            T* base = dx.data() + static_cast<std::size_t>(n) * C * HW;
            for (int c = 0; c < C; ++c)
                for (std::size_t p = 0; p < HW; ++p) base[static_cast<std::size_t>(c) * HW + p] += rowbase[p * C + c];
        }
    };
    return t.emit(std::move(out), {x}, bwd, "nchw_to_rows");
}

template <typename T>
Id concat_rows(Tape<T>& t, const std::vector<Id>& xs) {
    require<T>(!xs.empty(), "concat_rows", "needs at least one input");
    const int C = t.value(xs[0]).dim(1);
    int rows = 0;
    for (Id id : xs) {
        const Tensor<T>& v = t.value(id);
        require<T>(v.rank() == 2 && v.dim(1) == C, "concat_rows", "column counts must match");
        rows += v.dim(0);
    }
    Tensor<T> out({rows, C});
    std::size_t off = 0;
    for (Id id : xs) {
        const Tensor<T>& v = t.value(id);
        std::memcpy(out.data() + off, v.data(), static_cast<std::size_t>(v.size()) * sizeof(T));
        off += static_cast<std::size_t>(v.size());
    }
    auto bwd = [xs](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        std::size_t off = 0;
        for (Id id : xs) {
            Tensor<T>& dx = tp.grad_buffer(id);
            kernels::vaxpy(T(1), dy.data() + off, dx.data(), static_cast<std::size_t>(dx.size()));
            off += static_cast<std::size_t>(dx.size());
        }
    };
    std::vector<Id> inputs = xs;
    return t.emit(std::move(out), std::move(inputs), bwd, "concat_rows");
}

template <typename T>
Id gather_rows(Tape<T>& t, Id x, std::vector<int> indices) {
    const Tensor<T>& xv = t.value(x);
    require<T>(xv.rank() == 2, "gather_rows", "expects a row matrix");
    const int C = xv.dim(1);
    for (int i : indices)
        require<T>(i >= 0 && i < xv.dim(0), "gather_rows", "row index out of range");
    Tensor<T> out({static_cast<int>(indices.size()), C});
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::memcpy(out.data() + i * static_cast<std::size_t>(C),
                    xv.data() + static_cast<std::size_t>(indices[i]) * C,
                    static_cast<std::size_t>(C) * sizeof(T));
    auto bwd = [x, indices, C](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < indices.size(); ++i)
            kernels::vaxpy(T(1), dy.data() + i * static_cast<std::size_t>(C),
                           dx.data() + static_cast<std::size_t>(indices[i]) * C,
                           static_cast<std::size_t>(C));
    };
    return t.emit(std::move(out), {x}, bwd, "gather_rows");
}

template <typename T>
Id select_channel(Tape<T>& t, Id x, std::vector<int> labels) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "select_channel");
    const int N = xv.dim(0), K = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    require<T>(static_cast<int>(labels.size()) == N, "select_channel", "one label per batch row");
    for (int l : labels) require<T>(l >= 0 && l < K, "select_channel", "label out of range");
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        std::memcpy(out.data() + static_cast<std::size_t>(n) * HW,
                    xv.data() + (static_cast<std::size_t>(n) * K + labels[static_cast<std::size_t>(n)]) * HW,
                    HW * sizeof(T));
    auto bwd = [x, labels, K, HW](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::size_t n = 0; n < labels.size(); ++n)
            kernels::vaxpy(T(1), dy.data() + n * HW,
                           dx.data() + (n * K + static_cast<std::size_t>(labels[n])) * HW, HW);
    };
    return t.emit(std::move(out), {x}, bwd, "select_channel");
}

template <typename T>
Id select_column(Tape<T>& t, Id x, std::vector<int> labels) {
    const Tensor<T>& xv = t.value(x);
    require<T>(xv.rank() == 2, "select_column", "expects a row matrix");
    const int N = xv.dim(0), K = xv.dim(1);
    require<T>(static_cast<int>(labels.size()) == N, "select_column", "one label per row");
    for (int l : labels) require<T>(l >= 0 && l < K, "select_column", "label out of range");
    Tensor<T> out({N, 1});
    for (int n = 0; n < N; ++n) out[n] = xv[static_cast<std::int64_t>(n) * K + labels[static_cast<std::size_t>(n)]];
    auto bwd = [x, labels, K](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::size_t n = 0; n < labels.size(); ++n)
            dx[static_cast<std::int64_t>(n) * K + labels[n]] += dy[static_cast<std::int64_t>(n)];
    };
    return t.emit(std::move(out), {x}, bwd, "select_column");
}

// ---------------------------------------------------------------------------
// bilinear sampling family. Tap weights are always computed in double so the
// float and double execution paths see identical geometry.

namespace {

struct Tap {
    int x0, y0, x1, y1;
    double w00, w01, w10, w11;
};

inline Tap make_tap(double px, double py, int W, int H) {
    px = std::min(std::max(px, 0.0), static_cast<double>(W - 1));
    py = std::min(std::max(py, 0.0), static_cast<double>(H - 1));
    Tap tp;
    tp.x0 = static_cast<int>(std::floor(px));
    tp.y0 = static_cast<int>(std::floor(py));
    tp.x1 = std::min(tp.x0 + 1, W - 1);
    tp.y1 = std::min(tp.y0 + 1, H - 1);
    const double fx = px - tp.x0;
    const double fy = py - tp.y0;
    tp.w00 = (1.0 - fx) * (1.0 - fy);
    tp.w01 = fx * (1.0 - fy);
    tp.w10 = (1.0 - fx) * fy;
    tp.w11 = fx * fy;
    return tp;
}

}  // namespace

template <typename T>
void bilinear_sample(const Tensor<T>& x, double px, double py, T* out) {
    const auto& s = x.shape();
    if (s.size() < 3) throw std::invalid_argument("bilinear_sample: expects (..,C,H,W)");
    std::int64_t lead = 1;
    for (std::size_t i = 0; i + 3 < s.size(); ++i) lead *= s[i];
    if (lead != 1) throw std::invalid_argument("bilinear_sample: leading extents must be 1");
    const int C = s[s.size() - 3], H = s[s.size() - 2], W = s[s.size() - 1];
    const Tap tp = make_tap(px, py, W, H);
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c) {
        const T* plane = x.data() + static_cast<std::size_t>(c) * HW;
        const double v = tp.w00 * plane[static_cast<std::size_t>(tp.y0) * W + tp.x0] +
                         tp.w01 * plane[static_cast<std::size_t>(tp.y0) * W + tp.x1] +
                         tp.w10 * plane[static_cast<std::size_t>(tp.y1) * W + tp.x0] +
                         tp.w11 * plane[static_cast<std::size_t>(tp.y1) * W + tp.x1];
        out[c] = static_cast<T>(v);
    }
}

template <typename T>
Id bilinear_point(Tape<T>& t, Id x, double px, double py) {
    const Tensor<T>& xv = t.value(x);
    require_rank4(xv.shape(), "bilinear_point");
    require<T>(xv.dim(0) == 1, "bilinear_point", "expects batch extent 1");
    const int C = xv.dim(1);
    Tensor<T> out({1, C});
    bilinear_sample(xv, px, py, out.data());
    const int H = xv.dim(2), W = xv.dim(3);
    auto bwd = [x, px, py, C, H, W](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        Tensor<T>& dx = tp.grad_buffer(x);
        const Tap tap = make_tap(px, py, W, H);
        const std::size_t HW = static_cast<std::size_t>(H) * W;
        for (int c = 0; c < C; ++c) {
            T* plane = dx.data() + static_cast<std::size_t>(c) * HW;
            const T g = dy[c];
            plane[static_cast<std::size_t>(tap.y0) * W + tap.x0] += static_cast<T>(tap.w00) * g;
            plane[static_cast<std::size_t>(tap.y0) * W + tap.x1] += static_cast<T>(tap.w01) * g;
            plane[static_cast<std::size_t>(tap.y1) * W + tap.x0] += static_cast<T>(tap.w10) * g;
            plane[static_cast<std::size_t>(tap.y1) * W + tap.x1] += static_cast<T>(tap.w11) * g;
        }
    };
    return t.emit(std::move(out), {x}, bwd, "bilinear_point");
}

template <typename T>
Id roi_align(Tape<T>& t, const std::map<int, Id>& levels,
             const std::vector<RoiWindow>& rois, int out_size, int sampling) {
    require<T>(!rois.empty(), "roi_align", "needs at least one RoI");
    require<T>(out_size >= 1 && sampling >= 1, "roi_align", "bad output / sampling size");
    int C = -1;
    for (const auto& [lvl, id] : levels) {
        const Tensor<T>& v = t.value(id);
        require_rank4(v.shape(), "roi_align");
        if (C < 0) C = v.dim(1);
        require<T>(v.dim(1) == C, "roi_align", "levels must share channel count");
    }
    for (const RoiWindow& r : rois)
        require<T>(levels.count(r.level) == 1, "roi_align",
                   "RoI level " + std::to_string(r.level) + " missing from pyramid");

    const int R = static_cast<int>(rois.size());
    Tensor<T> out({R, C, out_size, out_size});
    const double inv_taps = 1.0 / (sampling * sampling);

    for (int r = 0; r < R; ++r) {
        const RoiWindow& roi = rois[static_cast<std::size_t>(r)];
        const Tensor<T>& F = t.value(levels.at(roi.level));
        const int H = F.dim(2), W = F.dim(3);
        const std::size_t HW = static_cast<std::size_t>(H) * W;
        const double scale = 1.0 / static_cast<double>(1 << roi.level);
        const double fx1 = roi.x1 * scale, fy1 = roi.y1 * scale;
        const double bw = (roi.x2 - roi.x1) * scale / out_size;
        const double bh = (roi.y2 - roi.y1) * scale / out_size;
        const T* base = F.data() + static_cast<std::size_t>(roi.batch) * C * HW;
        T* obase = out.data() + static_cast<std::size_t>(r) * C * out_size * out_size;
        for (int by = 0; by < out_size; ++by)
            for (int bx = 0; bx < out_size; ++bx) {
                std::vector<Tap> taps;
                taps.reserve(static_cast<std::size_t>(sampling) * sampling);
                for (int sy = 0; sy < sampling; ++sy)
                    for (int sx = 0; sx < sampling; ++sx) {
                        // -0.5 converts box-space positions to pixel-center
                        // coordinates (pixel i spans [i, i+1))
                        const double px = fx1 + (bx + (sx + 0.5) / sampling) * bw - 0.5;
                        const double py = fy1 + (by + (sy + 0.5) / sampling) * bh - 0.5;
                        taps.push_back(make_tap(px, py, W, H));
                    }
                for (int c = 0; c < C; ++c) {
                    const T* plane = base + static_cast<std::size_t>(c) * HW;
                    double acc = 0;
                    for (const Tap& tp : taps)
                        acc += tp.w00 * plane[static_cast<std::size_t>(tp.y0) * W + tp.x0] +
                               tp.w01 * plane[static_cast<std::size_t>(tp.y0) * W + tp.x1] +
                               tp.w10 * plane[static_cast<std::size_t>(tp.y1) * W + tp.x0] +
                               tp.w11 * plane[static_cast<std::size_t>(tp.y1) * W + tp.x1];
                    obase[(static_cast<std::size_t>(c) * out_size + by) * out_size + bx] =
                        static_cast<T>(acc * inv_taps);
                }
            }
    }

    std::vector<Id> inputs;
    for (const auto& [lvl, id] : levels) inputs.push_back(id);
    auto lv = levels;
    auto rs = rois;
    auto bwd = [lv, rs, out_size, sampling, C](Tape<T>& tp, Id self) {
        const Tensor<T>& dy = tp.grad(self);
        const double inv_taps = 1.0 / (sampling * sampling);
        for (int r = 0; r < static_cast<int>(rs.size()); ++r) {
            const RoiWindow& roi = rs[static_cast<std::size_t>(r)];
            Tensor<T>& dF = tp.grad_buffer(lv.at(roi.level));
            const int H = dF.dim(2), W = dF.dim(3);
            const std::size_t HW = static_cast<std::size_t>(H) * W;
            const double scale = 1.0 / static_cast<double>(1 << roi.level);
            const double fx1 = roi.x1 * scale, fy1 = roi.y1 * scale;
            const double bw = (roi.x2 - roi.x1) * scale / out_size;
            const double bh = (roi.y2 - roi.y1) * scale / out_size;
            T* base = dF.data() + static_cast<std::size_t>(roi.batch) * C * HW;
            const T* dybase = dy.data() + static_cast<std::size_t>(r) * C * out_size * out_size;
            for (int by = 0; by < out_size; ++by)
                for (int bx = 0; bx < out_size; ++bx)
                    for (int sy = 0; sy < sampling; ++sy)
                        for (int sx = 0; sx < sampling; ++sx) {
                            const double px = fx1 + (bx + (sx + 0.5) / sampling) * bw - 0.5;
                            const double py = fy1 + (by + (sy + 0.5) / sampling) * bh - 0.5;
                            const Tap tap = make_tap(px, py, W, H);
                            for (int c = 0; c < C; ++c) {
                                const T g = static_cast<T>(
                                    dybase[(static_cast<std::size_t>(c) * out_size + by) * out_size + bx] *
                                    inv_taps);
                                T* plane = base + static_cast<std::size_t>(c) * HW;
                                plane[static_cast<std::size_t>(tap.y0) * W + tap.x0] += static_cast<T>(tap.w00) * g;
                                plane[static_cast<std::size_t>(tap.y0) * W + tap.x1] += static_cast<T>(tap.w01) * g;
                                plane[static_cast<std::size_t>(tap.y1) * W + tap.x0] += static_cast<T>(tap.w10) * g;
                                plane[static_cast<std::size_t>(tap.y1) * W + tap.x1] += static_cast<T>(tap.w11) * g;
                            }
                        }
        }
    };
    return t.emit(std::move(out), std::move(inputs), bwd, "roi_align");
}

// ---------------------------------------------------------------------------
// losses

namespace {

template <typename T>
T softplus(T z) {
    return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

template <typename T>
Id focal_loss(Tape<T>& t, Id logits, const std::vector<int>& class_targets, T alpha, T gamma) {
    const Tensor<T>& zv = t.value(logits);
    require<T>(zv.rank() == 2, "focal_loss", "logits must be M x K");
    const int M = zv.dim(0), K = zv.dim(1);
    require<T>(static_cast<int>(class_targets.size()) == M, "focal_loss", "one target per row");
    require<T>(alpha > T(0) && alpha <= T(1) && gamma >= T(0), "focal_loss", "bad alpha/gamma");
    int num_pos = 0;
    for (int c : class_targets) {
        require<T>(c >= -1 && c < K, "focal_loss", "class target out of range");
        if (c >= 0) ++num_pos;
    }
    const T norm = T(1) / static_cast<T>(std::max(1, num_pos));
    double acc = 0;
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
            const T z = zv[static_cast<std::int64_t>(m) * K + k];
            const T p = sigmoid_scalar(z);
            if (class_targets[static_cast<std::size_t>(m)] == k) {
                acc += static_cast<double>(alpha * std::pow(T(1) - p, gamma) * softplus(-z));
            } else {
                acc += static_cast<double>((T(1) - alpha) * std::pow(p, gamma) * softplus(z));
            }
        }
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc) * norm;
    auto targets = class_targets;
    auto bwd = [logits, targets, alpha, gamma, norm, M, K](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0] * norm;
        const Tensor<T>& zv2 = tp.value(logits);
        Tensor<T>& dz = tp.grad_buffer(logits);
        for (int m = 0; m < M; ++m)
            for (int k = 0; k < K; ++k) {
                const std::int64_t i = static_cast<std::int64_t>(m) * K + k;
                const T z = zv2[i];
                const T p = sigmoid_scalar(z);
                T d;
                if (targets[static_cast<std::size_t>(m)] == k) {
                    // d/dz of alpha (1-p)^g (-log p)
                    const T logp = -softplus(-z);
                    d = alpha * std::pow(T(1) - p, gamma) * (gamma * p * logp + p - T(1));
                } else {
                    const T log1mp = -softplus(z);
                    d = (T(1) - alpha) * std::pow(p, gamma) * (p - gamma * (T(1) - p) * log1mp);
                }
                dz[i] += g * d;
            }
    };
    return t.emit(std::move(out), {logits}, bwd, "focal_loss");
}

template <typename T>
Id iou_loss(Tape<T>& t, Id pred, const Tensor<T>& target, const Tensor<T>& weights) {
    const Tensor<T>& pv = t.value(pred);
    require<T>(pv.rank() == 2 && pv.dim(1) == 4, "iou_loss", "pred must be M x 4");
    require<T>(target.same_shape(pv), "iou_loss", "target shape mismatch");
    const int M = pv.dim(0);
    require<T>(weights.size() == M, "iou_loss", "one weight per row");
    for (std::int64_t i = 0; i < pv.size(); ++i) {
        require<T>(pv[i] > T(0), "iou_loss", "predicted offsets must be positive");
        require<T>(target[i] > T(0), "iou_loss", "target offsets must be positive");
    }
    T wsum = T(0);
    for (std::int64_t i = 0; i < weights.size(); ++i) wsum += weights[i];
    require<T>(wsum > T(0), "iou_loss", "weights must not all be zero");

    double acc = 0;
    for (int m = 0; m < M; ++m) {
        const T* p = pv.data() + static_cast<std::size_t>(m) * 4;
        const T* q = target.data() + static_cast<std::size_t>(m) * 4;
        const T iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
        const T ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
        const T inter = iw * ih;
        const T areap = (p[0] + p[2]) * (p[1] + p[3]);
        const T areaq = (q[0] + q[2]) * (q[1] + q[3]);
        const T uni = areap + areaq - inter;
        acc += static_cast<double>(weights[m]) * (std::log(static_cast<double>(uni)) -
                                                  std::log(static_cast<double>(inter)));
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(wsum));

    Tensor<T> tgt = target;
    Tensor<T> wts = weights;
    auto bwd = [pred, tgt, wts, wsum, M](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0] / wsum;
        const Tensor<T>& pv2 = tp.value(pred);
        Tensor<T>& dp = tp.grad_buffer(pred);
        for (int m = 0; m < M; ++m) {
            const T* p = pv2.data() + static_cast<std::size_t>(m) * 4;
            const T* q = tgt.data() + static_cast<std::size_t>(m) * 4;
            const T iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
            const T ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
            const T inter = iw * ih;
            const T areap = (p[0] + p[2]) * (p[1] + p[3]);
            const T areaq = (q[0] + q[2]) * (q[1] + q[3]);
            const T uni = areap + areaq - inter;
            const T wm = wts[m] * g;
            // loss_m = log(areap + areaq - inter) - log(inter)
            const T dA = wm / uni;
            const T dI = -wm / uni - wm / inter;
            T* d = dp.data() + static_cast<std::size_t>(m) * 4;
            const T dAdl = p[1] + p[3], dAdt = p[0] + p[2];
            d[0] += dA * dAdl + dI * ((p[0] <= q[0]) ? ih : T(0));
            d[2] += dA * dAdl + dI * ((p[2] <= q[2]) ? ih : T(0));
            d[1] += dA * dAdt + dI * ((p[1] <= q[1]) ? iw : T(0));
            d[3] += dA * dAdt + dI * ((p[3] <= q[3]) ? iw : T(0));
        }
    };
    return t.emit(std::move(out), {pred}, bwd, "iou_loss");
}

template <typename T>
Id bce_mean(Tape<T>& t, Id logits, const Tensor<T>& targets) {
    const Tensor<T>& zv = t.value(logits);
    require<T>(zv.same_shape(targets), "bce_mean", "target shape mismatch");
    for (std::int64_t i = 0; i < targets.size(); ++i)
        require<T>(targets[i] >= T(0) && targets[i] <= T(1), "bce_mean", "target outside [0,1]");
    const std::int64_t n = zv.size();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i)
        acc += static_cast<double>(softplus(zv[i]) - targets[i] * zv[i]);
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(n));
    Tensor<T> tgt = targets;
    auto bwd = [logits, tgt, n](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0] / static_cast<T>(n);
        const Tensor<T>& zv2 = tp.value(logits);
        Tensor<T>& dz = tp.grad_buffer(logits);
        for (std::int64_t i = 0; i < n; ++i)
            dz[i] += g * (sigmoid_scalar(zv2[i]) - tgt[i]);
    };
    return t.emit(std::move(out), {logits}, bwd, "bce_mean");
}

template <typename T>
Id mse_mean(Tape<T>& t, Id pred, const Tensor<T>& target) {
    const Tensor<T>& pv = t.value(pred);
    require<T>(pv.same_shape(target), "mse_mean", "target shape mismatch");
    const std::int64_t n = pv.size();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pv[i]) - static_cast<double>(target[i]);
        acc += d * d;
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(n));
    Tensor<T> tgt = target;
    auto bwd = [pred, tgt, n](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0] * T(2) / static_cast<T>(n);
        const Tensor<T>& pv2 = tp.value(pred);
        Tensor<T>& dp = tp.grad_buffer(pred);
        for (std::int64_t i = 0; i < n; ++i) dp[i] += g * (pv2[i] - tgt[i]);
    };
    return t.emit(std::move(out), {pred}, bwd, "mse_mean");
}

template <typename T>
Id add_scalars(Tape<T>& t, const std::vector<Id>& parts) {
    require<T>(!parts.empty(), "add_scalars", "needs at least one part");
    T acc = T(0);
    for (Id id : parts) {
        require<T>(t.value(id).size() == 1, "add_scalars", "parts must be scalars");
        acc += t.value(id)[0];
    }
    Tensor<T> out({1});
    out[0] = acc;
    auto ps = parts;
    auto bwd = [ps](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0];
        for (Id id : ps) tp.grad_buffer(id)[0] += g;
    };
    std::vector<Id> inputs = parts;
    return t.emit(std::move(out), std::move(inputs), bwd, "add_scalars");
}

template <typename T>
Id sum_all(Tape<T>& t, Id x) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> out({1});
    out[0] = kernels::tsum(xv.data(), static_cast<std::size_t>(xv.size()));
    auto bwd = [x](Tape<T>& tp, Id self) {
        const T g = tp.grad(self)[0];
        Tensor<T>& dx = tp.grad_buffer(x);
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g;
    };
    return t.emit(std::move(out), {x}, bwd, "sum_all");
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define CENTERMASK_INSTANTIATE(T)                                                              \
    template Id conv2d<T>(Tape<T>&, Id, Id, Id, int, int);                                     \
    template Id deconv2d_2x2<T>(Tape<T>&, Id, Id, Id);                                         \
    template Id fully_connected<T>(Tape<T>&, Id, Id, Id);                                      \
    template Id activation<T>(Tape<T>&, Id, Activation);                                       \
    template Id exp_clamped<T>(Tape<T>&, Id, T);                                               \
    template Id mul_scalar_param<T>(Tape<T>&, Id, Id);                                         \
    template Id concat_channels<T>(Tape<T>&, const std::vector<Id>&);                          \
    template Id reduce_channel<T>(Tape<T>&, Id, ReduceMode);                                   \
    template Id global_avg_pool<T>(Tape<T>&, Id);                                              \
    template Id add<T>(Tape<T>&, Id, Id);                                                      \
    template Id mul<T>(Tape<T>&, Id, Id);                                                      \
    template Id mul_channel_gate<T>(Tape<T>&, Id, Id);                                         \
    template Id mul_spatial_gate<T>(Tape<T>&, Id, Id);                                         \
    template Id maxpool2d<T>(Tape<T>&, Id, int, int, int);                                     \
    template Id upsample_nearest2x<T>(Tape<T>&, Id);                                           \
    template Id reshape<T>(Tape<T>&, Id, std::vector<int>);                                    \
    template Id nchw_to_rows<T>(Tape<T>&, Id);                                                 \
    template Id concat_rows<T>(Tape<T>&, const std::vector<Id>&);                              \
    template Id gather_rows<T>(Tape<T>&, Id, std::vector<int>);                                \
    template Id select_channel<T>(Tape<T>&, Id, std::vector<int>);                             \
    template Id select_column<T>(Tape<T>&, Id, std::vector<int>);                              \
    template Id roi_align<T>(Tape<T>&, const std::map<int, Id>&, const std::vector<RoiWindow>&, \
                             int, int);                                                        \
    template Id bilinear_point<T>(Tape<T>&, Id, double, double);                               \
    template void bilinear_sample<T>(const Tensor<T>&, double, double, T*);                    \
    template T sigmoid_scalar<T>(T);                                                           \
    template Id focal_loss<T>(Tape<T>&, Id, const std::vector<int>&, T, T);                    \
    template Id iou_loss<T>(Tape<T>&, Id, const Tensor<T>&, const Tensor<T>&);                 \
    template Id bce_mean<T>(Tape<T>&, Id, const Tensor<T>&);                                   \
    template Id mse_mean<T>(Tape<T>&, Id, const Tensor<T>&);                                   \
    template Id add_scalars<T>(Tape<T>&, const std::vector<Id>&);                              \
    template Id sum_all<T>(Tape<T>&, Id);

CENTERMASK_INSTANTIATE(float)
CENTERMASK_INSTANTIATE(double)

#undef CENTERMASK_INSTANTIATE

}  // namespace centermask::ad
