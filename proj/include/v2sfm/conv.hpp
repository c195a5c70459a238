#pragma once

// 2-D convolution over [C,H,W] with [K,C,kh,kw] kernels, stride and
// same/valid padding, via im2col + GEMM. Gradients flow to both input and
// kernel. Row-parallel GEMM keeps every reduction inside one worker, so
// results are bitwise independent of the thread count.

#include <cstring>
#include <vector>

#include "v2sfm/array.hpp"
#include "v2sfm/parallel.hpp"

namespace v2sfm {

enum class Pad { Same, Valid };

namespace detail {

// Column tile width; keeps a K x NT slab of B resident in L2 while every
// output row passes over it.
constexpr int kGemmTile = 1024;

// Reusable per-thread buffers for im2col slabs; avoids the mmap/page-fault
// churn of allocating multi-MB scratch on every conv call.
inline std::vector<double>& conv_scratch(int slot, std::size_t n) {
    thread_local std::vector<double> bufs[4];
    std::vector<double>& b = bufs[slot];
    if (b.size() < n) b.resize(n);
    return b;
}

// C[M,N] += A[M,K] * B[K,N], all row-major.
inline void gemm(const double* __restrict a, const double* __restrict b,
                 double* __restrict c, int m, int k, int n) {
    parallel_for(m, [&](std::int64_t m0, std::int64_t m1) {
        for (int j0 = 0; j0 < n; j0 += kGemmTile) {
            const int j1 = std::min(n, j0 + kGemmTile);
            for (std::int64_t i = m0; i < m1; ++i) {
                double* __restrict crow = c + i * n;
                const double* __restrict arow = a + i * k;
                int p = 0;
                for (; p + 4 <= k; p += 4) {
                    const double a0 = arow[p], a1 = arow[p + 1];
                    const double a2 = arow[p + 2], a3 = arow[p + 3];
                    const double* __restrict b0 = b + static_cast<std::size_t>(p) * n;
                    const double* __restrict b1 = b0 + n;
                    const double* __restrict b2 = b1 + n;
                    const double* __restrict b3 = b2 + n;
                    for (int j = j0; j < j1; ++j)
                        crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                for (; p < k; ++p) {
                    const double av = arow[p];
                    const double* __restrict brow = b + static_cast<std::size_t>(p) * n;
                    for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
                }
            }
        }
    });
}

// C[K,N] += A^T * B with A[M,K], B[M,N].
inline void gemm_at_b(const double* __restrict a, const double* __restrict b,
                      double* __restrict c, int m, int k, int n) {
    parallel_for(k, [&](std::int64_t k0, std::int64_t k1) {
        for (int j0 = 0; j0 < n; j0 += kGemmTile) {
            const int j1 = std::min(n, j0 + kGemmTile);
            for (int i = 0; i < m; ++i) {
                const double* __restrict arow = a + static_cast<std::size_t>(i) * k;
                const double* __restrict brow = b + static_cast<std::size_t>(i) * n;
                for (std::int64_t p = k0; p < k1; ++p) {
                    const double av = arow[p];
                    double* __restrict crow = c + p * n;
                    for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
                }
            }
        }
    });
}

// bt[N,K] = b[K,N] transposed, blocked for cache friendliness.
inline void transpose_to(const double* __restrict b, double* __restrict bt, int k, int n) {
    constexpr int blk = 64;
    for (int p0 = 0; p0 < k; p0 += blk)
        for (int j0 = 0; j0 < n; j0 += blk) {
            const int p1 = std::min(k, p0 + blk), j1 = std::min(n, j0 + blk);
            for (int p = p0; p < p1; ++p)
                for (int j = j0; j < j1; ++j)
                    bt[static_cast<std::size_t>(j) * k + p] = b[static_cast<std::size_t>(p) * n + j];
        }
}

// C[M,K] += A * B^T with A[M,N], B[K,N]. B is transposed once so the inner
// update is a contiguous axpy, which this target executes far faster than a
// strided dot product.
inline void gemm_abt(const double* __restrict a, const double* __restrict b,
                     double* __restrict c, int m, int k, int n) {
    std::vector<double>& btv = conv_scratch(3, static_cast<std::size_t>(k) * n);
    transpose_to(b, btv.data(), k, n);
    const double* __restrict bt = btv.data();
    parallel_for(m, [&](std::int64_t m0, std::int64_t m1) {
        for (std::int64_t i = m0; i < m1; ++i) {
            const double* __restrict arow = a + i * n;
            double* __restrict crow = c + i * k;
            for (int j = 0; j < n; ++j) {
                const double av = arow[j];
                const double* __restrict brow = bt + static_cast<std::size_t>(j) * k;
                for (int p = 0; p < k; ++p) crow[p] += av * brow[p];
            }
        }
    });
}

struct ConvDims {
    int c, h, w, k, kh, kw, stride, pad, oh, ow;
};

inline ConvDims conv_dims(const Shape& in, const Shape& ker, int stride, Pad padding) {
    if (in.size() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(in));
    if (ker.size() != 4) throw ShapeError("conv2d: kernel must be [K,C,kh,kw], got " + shape_str(ker));
    if (ker[1] != in[0])
        throw ShapeError("conv2d: kernel expects " + std::to_string(ker[1]) +
                         " input channels, input has " + std::to_string(in[0]));
    if (ker[2] % 2 == 0 || ker[3] % 2 == 0)
        throw ShapeError("conv2d: kernel spatial dims must be odd");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    ConvDims d;
    d.c = in[0];
    d.h = in[1];
    d.w = in[2];
    d.k = ker[0];
    d.kh = ker[2];
    d.kw = ker[3];
    d.stride = stride;
    d.pad = (padding == Pad::Same) ? (d.kh - 1) / 2 : 0;
    const int ph = d.h + 2 * d.pad, pw = d.w + 2 * d.pad;
    if (d.kh > ph || d.kw > pw)
        throw ShapeError("conv2d: kernel larger than padded input");
    d.oh = (ph - d.kh) / stride + 1;
    d.ow = (pw - d.kw) / stride + 1;
    return d;
}

// Valid output-column range [lo, hi) for a kernel column kj: those ox with
// 0 <= ox*stride - pad + kj < w.
inline void ox_span(int kj, const ConvDims& d, int& lo, int& hi) {
    const int shift = d.pad - kj;
    lo = shift <= 0 ? 0 : (shift + d.stride - 1) / d.stride;
    hi = std::min(d.ow, (d.w - 1 + shift) / d.stride + 1);
    if (hi < lo) hi = lo;
}

inline void im2col(const double* x, const ConvDims& d, double* col) {
    const int rows = d.c * d.kh * d.kw;
    const int cols = d.oh * d.ow;
    parallel_for(rows, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const int c = static_cast<int>(r) / (d.kh * d.kw);
            const int ki = (static_cast<int>(r) / d.kw) % d.kh;
            const int kj = static_cast<int>(r) % d.kw;
            int lo, hi;
            ox_span(kj, d, lo, hi);
            const double* plane = x + static_cast<std::size_t>(c) * d.h * d.w;
            double* dst = col + r * cols;
            for (int oy = 0; oy < d.oh; ++oy) {
                double* drow = dst + static_cast<std::size_t>(oy) * d.ow;
                const int iy = oy * d.stride - d.pad + ki;
                if (iy < 0 || iy >= d.h) {
                    std::memset(drow, 0, sizeof(double) * static_cast<std::size_t>(d.ow));
                    continue;
                }
                const double* srow = plane + static_cast<std::size_t>(iy) * d.w;
                for (int ox = 0; ox < lo; ++ox) drow[ox] = 0.0;
                if (d.stride == 1) {
                    std::memcpy(drow + lo, srow + lo - d.pad + kj,
                                sizeof(double) * static_cast<std::size_t>(hi - lo));
                } else {
                    for (int ox = lo; ox < hi; ++ox)
                        drow[ox] = srow[ox * d.stride - d.pad + kj];
                }
                for (int ox = hi; ox < d.ow; ++ox) drow[ox] = 0.0;
            }
        }
    });
}

inline void col2im_add(const double* col, const ConvDims& d, double* gx) {
    const int cols = d.oh * d.ow;
    // Channels write to disjoint planes, so this parallelizes bitwise-safely.
    parallel_for(d.c, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            double* plane = gx + static_cast<std::size_t>(c) * d.h * d.w;
            for (int ki = 0; ki < d.kh; ++ki)
                for (int kj = 0; kj < d.kw; ++kj) {
                    int lo, hi;
                    ox_span(kj, d, lo, hi);
                    const double* src =
                        col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                               static_cast<std::size_t>(ki) * d.kw + kj) * cols;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int iy = oy * d.stride - d.pad + ki;
                        if (iy < 0 || iy >= d.h) continue;
                        const double* __restrict srow = src + static_cast<std::size_t>(oy) * d.ow;
                        double* __restrict drow = plane + static_cast<std::size_t>(iy) * d.w - d.pad + kj;
                        if (d.stride == 1) {
                            for (int ox = lo; ox < hi; ++ox) drow[ox] += srow[ox];
                        } else {
                            for (int ox = lo; ox < hi; ++ox)
                                drow[static_cast<std::size_t>(ox) * d.stride] += srow[ox];
                        }
                    }
                }
        }
    });
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, Pad padding) {
    const detail::ConvDims d = detail::conv_dims(input.shape(), kernel.shape(), stride, padding);
    const int rows = d.c * d.kh * d.kw;
    const int cols = d.oh * d.ow;
    std::vector<double>& col = detail::conv_scratch(0, static_cast<std::size_t>(rows) * cols);
    detail::im2col(input.values().data(), d, col.data());

    const bool rg = input.requires_grad() || kernel.requires_grad();
    Tensor out = detail::make_result({d.k, d.oh, d.ow}, rg);
    detail::gemm(kernel.values().data(), col.data(), out.raw_values().data(), d.k, rows, cols);
    detail::check_finite(out.values(), "conv2d");

    if (detail::recording(rg)) {
        auto in_n = input.node();
        auto k_n = kernel.node();
        auto o_n = out.node();
        Tape::active()->record([in_n, k_n, o_n, d, rows, cols] {
            if (o_n->g.empty()) return;
            // im2col is recomputed rather than saved; inputs outlive the tape.
            std::vector<double>& col2 = detail::conv_scratch(1, static_cast<std::size_t>(rows) * cols);
            detail::im2col(in_n->v.data(), d, col2.data());
            if (k_n->requires_grad) {
                k_n->ensure_grad();
                detail::gemm_abt(o_n->g.data(), col2.data(), k_n->g.data(), d.k, rows, cols);
            }
            if (in_n->requires_grad) {
                in_n->ensure_grad();
                std::vector<double>& gcol = detail::conv_scratch(2, static_cast<std::size_t>(rows) * cols);
                std::fill(gcol.begin(), gcol.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(rows) * cols), 0.0);
                detail::gemm_at_b(k_n->v.data(), o_n->g.data(), gcol.data(), d.k, rows, cols);
                detail::col2im_add(gcol.data(), d, in_n->g.data());
            }
        });
    }
    return out;
}

}  // namespace v2sfm
