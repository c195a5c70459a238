#pragma once

// Self-supervised training objective: brightness-corrected photometric loss
// (SSIM + L2), edge-aware disparity smoothness, and symmetric geometric
// consistency, combined as alpha*L_p + beta*L_s + gamma*L_g per source/target
// pairing and averaged over the snippet's two pairings.

#include <cmath>
#include <vector>

#include "v2sfm/array.hpp"
#include "v2sfm/ops.hpp"

namespace v2sfm {

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma = 0.5;
    double epsilon = 0.85;

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0)
            throw ValidationError("LossWeights: weights must be non-negative");
        if (epsilon < 0 || epsilon > 1)
            throw ValidationError("LossWeights: epsilon must lie in [0,1]");
    }
};

struct BrightnessAffine {
    double gain = 1.0;    // clamped to [0.5, 2.0]
    double offset = 0.0;  // intensity units
};

// Masked least-squares fit of tgt ~ gain * warp + offset, over all channels.
// The coefficients are plain values: the fit is held constant within a
// training step and never differentiated through.
inline BrightnessAffine brightness_fit(const Tensor& warp, const Tensor& tgt, const Tensor& mask) {
    if (!same_shape(warp.shape(), tgt.shape()))
        throw ShapeError("brightness_fit: image shapes differ");
    if (warp.size() % mask.size() != 0)
        throw ShapeError("brightness_fit: mask does not tile images");
    const std::int64_t npix = mask.size();
    const std::int64_t channels = warp.size() / npix;
    double n = 0.0, sw = 0.0, st = 0.0, sww = 0.0, swt = 0.0;
    for (std::int64_t c = 0; c < channels; ++c) {
        const double* pw = warp.values().data() + c * npix;
        const double* pt = tgt.values().data() + c * npix;
        for (std::int64_t i = 0; i < npix; ++i) {
            if (mask.values()[static_cast<std::size_t>(i)] <= 0.5) continue;
            n += 1.0;
            sw += pw[i];
            st += pt[i];
            sww += pw[i] * pw[i];
            swt += pw[i] * pt[i];
        }
    }
    if (n < 2.0) throw ValidationError("brightness_fit: fewer than 2 valid pixels");
    const double var = sww - sw * sw / n;
    BrightnessAffine out;
    if (var < 1e-12 * n) {
        // constant warped image: leave the gain alone, absorb the difference
        out.gain = 1.0;
        out.offset = (st - sw) / n;
        return out;
    }
    double a = (swt - sw * st / n) / var;
    if (a < 0.5) a = 0.5;
    if (a > 2.0) a = 2.0;
    out.gain = a;
    out.offset = (st - a * sw) / n;
    return out;
}

// Per-pixel SSIM with a uniform window and reflect-101 padding.
inline Tensor ssim_map(const Tensor& x, const Tensor& y, int window = 7,
                       double c1 = 0.01 * 0.01, double c2 = 0.03 * 0.03) {
    if (!same_shape(x.shape(), y.shape()))
        throw ShapeError("ssim_map: image shapes differ");
    if (x.ndim() != 3) throw ShapeError("ssim_map: expected [C,H,W]");
    Tensor mu_x = box_filter(x, window);
    Tensor mu_y = box_filter(y, window);
    Tensor mu_xx = square(mu_x);
    Tensor mu_yy = square(mu_y);
    Tensor mu_xy = mul(mu_x, mu_y);
    Tensor sig_x = sub(box_filter(square(x), window), mu_xx);
    Tensor sig_y = sub(box_filter(square(y), window), mu_yy);
    Tensor sig_xy = sub(box_filter(mul(x, y), window), mu_xy);
    Tensor num = mul(add_scalar(mul_scalar(mu_xy, 2.0), c1), add_scalar(mul_scalar(sig_xy, 2.0), c2));
    Tensor den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sig_x, sig_y), c2));
    return divide(num, den);
}

// Brightness-aware photometric loss. When `fixed` is null the affine fit is
// computed from the current values (training); callers doing derivative
// probes pass a precomputed fit so the function stays smooth in its inputs.
inline Tensor photometric_loss(const Tensor& warp, const Tensor& tgt, const Tensor& mask,
                               const LossWeights& w, const BrightnessAffine* fixed = nullptr) {
    const BrightnessAffine bc = fixed ? *fixed : brightness_fit(warp, tgt, mask);
    Tensor corrected = add_scalar(mul_scalar(warp, bc.gain), bc.offset);
    Tensor ssim = ssim_map(corrected, tgt);
    Tensor ssim_term = masked_mean(mul_scalar(add_scalar(neg(ssim), 1.0), 0.5), mask);
    Tensor l2_term = masked_mean(square(sub(corrected, tgt)), mask);
    return add(mul_scalar(ssim_term, w.epsilon), mul_scalar(l2_term, 1.0 - w.epsilon));
}

// Edge-aware smoothness on mean-normalized disparity. The image enters only
// through constant attenuation weights.
inline Tensor smoothness_loss(const Tensor& disp, const Tensor& image) {
    if (disp.ndim() != 2) throw ShapeError("smoothness_loss: disparity must be [H,W]");
    if (image.ndim() != 3 || image.dim(1) != disp.dim(0) || image.dim(2) != disp.dim(1))
        throw ShapeError("smoothness_loss: image does not match disparity");
    const int h = disp.dim(0), w = disp.dim(1);
    double m = 0.0;
    for (double v : disp.values()) m += v;
    m /= static_cast<double>(disp.size());
    if (m <= 1e-8) throw NumericalError("smoothness_loss: disparity mean too small");
    Tensor mean_disp = mean(disp);

    // exp(-|dI|) weights averaged over channels, as plain values
    const int c = image.dim(0);
    Tensor wx = Tensor::zeros({h, w});
    Tensor wy = Tensor::zeros({h, w});
    const double* pi = image.values().data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double gx = 0.0, gy = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const double* plane = pi + static_cast<std::size_t>(ch) * h * w;
                if (j + 1 < w)
                    gx += std::abs(plane[static_cast<std::size_t>(i) * w + j + 1] -
                                   plane[static_cast<std::size_t>(i) * w + j]);
                if (i + 1 < h)
                    gy += std::abs(plane[static_cast<std::size_t>(i + 1) * w + j] -
                                   plane[static_cast<std::size_t>(i) * w + j]);
            }
            wx.raw_values()[static_cast<std::size_t>(i) * w + j] = std::exp(-gx / c);
            wy.raw_values()[static_cast<std::size_t>(i) * w + j] = std::exp(-gy / c);
        }

    Tensor dstar = divide(disp, mean_disp);
    Tensor tx = mul(abs_t(fdiff_x(dstar)), wx);
    Tensor ty = mul(abs_t(fdiff_y(dstar)), wy);
    const double nx = static_cast<double>(h) * (w - 1);
    const double ny = static_cast<double>(h - 1) * w;
    return add(mul_scalar(sum(tx), 1.0 / nx), mul_scalar(sum(ty), 1.0 / ny));
}

// Symmetric relative depth difference |a-b| / (a+b), masked mean; lies in
// [0,1) for positive depths.
inline Tensor geometry_loss(const Tensor& d_proj, const Tensor& d_interp, const Tensor& mask) {
    if (!same_shape(d_proj.shape(), d_interp.shape()))
        throw ShapeError("geometry_loss: depth shapes differ");
    const double* pp = d_proj.values().data();
    const double* pi = d_interp.values().data();
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        if (mask.values()[static_cast<std::size_t>(i)] <= 0.5) continue;
        if (pp[i] <= 0.0 || pi[i] <= 0.0)
            throw ValidationError("geometry_loss: non-positive depth inside mask");
    }
    Tensor num = abs_t(sub(d_proj, d_interp));
    // off-mask denominators may be arbitrary; floor them so the division is
    // defined everywhere, masked entries are unaffected
    Tensor den = clamp_min(add(d_proj, d_interp), 1e-3);
    return masked_mean(divide(num, den), mask);
}

// One target/source pairing's component losses.
struct PairLosses {
    Tensor photometric;
    Tensor smoothness;
    Tensor geometric;
};

inline Tensor total_loss(const std::vector<PairLosses>& pairs, const LossWeights& w) {
    if (pairs.empty()) throw ValidationError("total_loss: no pairings");
    w.validate();
    Tensor acc;
    bool first = true;
    for (const PairLosses& p : pairs) {
        Tensor term = add(mul_scalar(p.photometric, w.alpha),
                          add(mul_scalar(p.smoothness, w.beta), mul_scalar(p.geometric, w.gamma)));
        acc = first ? term : add(acc, term);
        first = false;
    }
    Tensor out = mul_scalar(acc, 1.0 / static_cast<double>(pairs.size()));
    if (!std::isfinite(out.item())) throw NumericalError("total_loss: non-finite");
    return out;
}

}  // namespace v2sfm
