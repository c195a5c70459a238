#pragma once

// Radix-2 2-D FFT over [C,H,W] fields with reverse-mode gradients.
// Spatial dims must be powers of two. The forward transform is unnormalized;
// the inverse carries the 1/(H*W) factor, so ifft2(fft2(x)) == x.
//
// Spectra are stored as paired real/imaginary DiffArrays; gradient rules:
//   y = fft(x), x real:          x_bar = Re(N * ifft(y_bar))
//   y = Re(ifft(s)):             s_bar = (1/N) * fft(y_bar)
// both derived from the (symmetric) DFT matrix acting as a real-linear map.

#include <cmath>
#include <unordered_map>
#include <vector>

#include "v2sfm/array.hpp"

namespace v2sfm {

struct SpectrumField {
    Tensor re;
    Tensor im;

    const Shape& shape() const { return re.shape(); }
};

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

struct FftPlan {
    std::vector<int> rev;       // bit-reversal permutation
    std::vector<double> cos_t;  // twiddles per stage, packed
    std::vector<double> sin_t;
};

inline const FftPlan& fft_plan(int n) {
    thread_local std::unordered_map<int, FftPlan> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    FftPlan plan;
    plan.rev.resize(static_cast<std::size_t>(n));
    int log2n = 0;
    while ((1 << log2n) < n) ++log2n;
    for (int i = 0; i < n; ++i) {
        int r = 0;
        for (int b = 0; b < log2n; ++b)
            if (i & (1 << b)) r |= 1 << (log2n - 1 - b);
        plan.rev[static_cast<std::size_t>(i)] = r;
    }
    // Stage s uses n/2 twiddles at angles -2*pi*j/(2^s); pack all stages.
    plan.cos_t.reserve(static_cast<std::size_t>(n));
    plan.sin_t.reserve(static_cast<std::size_t>(n));
    for (int len = 2; len <= n; len <<= 1) {
        const double ang0 = -6.283185307179586476925286766559 / len;
        for (int j = 0; j < len / 2; ++j) {
            plan.cos_t.push_back(std::cos(ang0 * j));
            plan.sin_t.push_back(std::sin(ang0 * j));
        }
    }
    return cache.emplace(n, std::move(plan)).first->second;
}

// In-place complex FFT of n strided elements. inverse=true conjugates the
// twiddles; normalization is the caller's responsibility.
inline void fft_line(double* re, double* im, int n, int stride, bool inverse) {
    if (n == 1) return;
    const FftPlan& plan = fft_plan(n);
    for (int i = 0; i < n; ++i) {
        const int j = plan.rev[static_cast<std::size_t>(i)];
        if (j > i) {
            std::swap(re[i * stride], re[j * stride]);
            std::swap(im[i * stride], im[j * stride]);
        }
    }
    std::size_t tw = 0;
    for (int len = 2; len <= n; len <<= 1) {
        const int half = len / 2;
        for (int base = 0; base < n; base += len) {
            for (int j = 0; j < half; ++j) {
                const double wr = plan.cos_t[tw + static_cast<std::size_t>(j)];
                const double wi = inverse ? -plan.sin_t[tw + static_cast<std::size_t>(j)]
                                          : plan.sin_t[tw + static_cast<std::size_t>(j)];
                double* ar = re + static_cast<std::size_t>(base + j) * stride;
                double* ai = im + static_cast<std::size_t>(base + j) * stride;
                double* br = re + static_cast<std::size_t>(base + j + half) * stride;
                double* bi = im + static_cast<std::size_t>(base + j + half) * stride;
                const double tr = *br * wr - *bi * wi;
                const double ti = *br * wi + *bi * wr;
                *br = *ar - tr;
                *bi = *ai - ti;
                *ar += tr;
                *ai += ti;
            }
        }
        tw += static_cast<std::size_t>(half);
    }
}

// 2-D transform of one H x W plane, rows then columns.
inline void fft_plane(double* re, double* im, int h, int w, bool inverse) {
    for (int i = 0; i < h; ++i)
        fft_line(re + static_cast<std::size_t>(i) * w, im + static_cast<std::size_t>(i) * w, w, 1, inverse);
    for (int j = 0; j < w; ++j) fft_line(re + j, im + j, h, w, inverse);
}

inline void check_fft_shape(const Shape& s, const char* op) {
    if (s.size() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W], got " + shape_str(s));
    if (!is_pow2(s[1]) || !is_pow2(s[2]))
        throw ShapeError(std::string(op) + ": spatial dims must be powers of two, got " + shape_str(s));
}

// Transform every channel of a [C,H,W] complex field in place.
inline void fft_field(double* re, double* im, int c, int h, int w, bool inverse) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch)
        fft_plane(re + plane * static_cast<std::size_t>(ch), im + plane * static_cast<std::size_t>(ch), h, w, inverse);
}

}  // namespace detail

inline SpectrumField fft2(const Tensor& x) {
    detail::check_fft_shape(x.shape(), "fft2");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const bool rg = x.requires_grad();
    Tensor re = detail::make_result(x.shape(), rg);
    Tensor im = detail::make_result(x.shape(), rg);
    std::copy(x.values().begin(), x.values().end(), re.raw_values().begin());
    detail::fft_field(re.raw_values().data(), im.raw_values().data(), c, h, w, false);
    detail::check_finite(re.values(), "fft2");
    detail::check_finite(im.values(), "fft2");
    if (detail::recording(rg)) {
        auto xn = x.node();
        auto rn = re.node();
        auto in = im.node();
        Tape::active()->record([xn, rn, in, c, h, w] {
            if (rn->g.empty() && in->g.empty()) return;
            xn->ensure_grad();
            const std::size_t n = xn->v.size();
            std::vector<double> gr(n, 0.0), gi(n, 0.0);
            if (!rn->g.empty()) gr.assign(rn->g.begin(), rn->g.end());
            if (!in->g.empty()) gi.assign(in->g.begin(), in->g.end());
            // x_bar = Re(N * ifft(y_bar)); the N cancels the 1/N of the inverse.
            detail::fft_field(gr.data(), gi.data(), c, h, w, true);
            for (std::size_t i = 0; i < n; ++i) xn->g[i] += gr[i];
        });
    }
    return {re, im};
}

// Inverse transform returning the real part. The imaginary residue must be
// numerically zero (conjugate-symmetric spectra); a residue above the
// tolerance indicates a corrupted spectrum.
inline Tensor ifft2(const SpectrumField& s, double imag_tol = 1e-9) {
    detail::check_fft_shape(s.re.shape(), "ifft2");
    if (!same_shape(s.re.shape(), s.im.shape()))
        throw ShapeError("ifft2: real/imag shape mismatch");
    const int c = s.re.dim(0), h = s.re.dim(1), w = s.re.dim(2);
    const double inv_n = 1.0 / (static_cast<double>(h) * static_cast<double>(w));
    const bool rg = s.re.requires_grad() || s.im.requires_grad();
    Tensor out = detail::make_result(s.re.shape(), rg);

    std::vector<double> re(s.re.values().begin(), s.re.values().end());
    std::vector<double> im(s.im.values().begin(), s.im.values().end());
    detail::fft_field(re.data(), im.data(), c, h, w, true);

    double scale = 0.0;
    for (double v : re) scale = std::max(scale, std::abs(v) * inv_n);
    scale = std::max(scale, 1.0);
    for (double v : im) {
        if (std::abs(v) * inv_n > imag_tol * scale)
            throw NumericalError("ifft2: imaginary residue " + std::to_string(std::abs(v) * inv_n) +
                                 " exceeds tolerance");
    }
    double* po = out.raw_values().data();
    for (std::size_t i = 0; i < re.size(); ++i) po[i] = re[i] * inv_n;
    detail::check_finite(out.values(), "ifft2");

    if (detail::recording(rg)) {
        auto rn = s.re.node();
        auto in = s.im.node();
        auto on = out.node();
        Tape::active()->record([rn, in, on, c, h, w, inv_n] {
            if (on->g.empty()) return;
            const std::size_t n = on->v.size();
            std::vector<double> gr(on->g.begin(), on->g.end());
            std::vector<double> gi(n, 0.0);
            detail::fft_field(gr.data(), gi.data(), c, h, w, false);
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) rn->g[i] += gr[i] * inv_n;
            }
            if (in->requires_grad) {
                in->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) in->g[i] += gi[i] * inv_n;
            }
        });
    }
    return out;
}

}  // namespace v2sfm
