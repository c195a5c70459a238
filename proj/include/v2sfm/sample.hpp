#pragma once

// Differentiable bilinear sampling of a [C,H,W] field at per-pixel
// coordinates. Outside the field the contribution is zero (zeros border);
// the validity mask marks pixels whose whole 2x2 neighborhood is inside.

#include <cmath>
#include <utility>

#include "v2sfm/array.hpp"

namespace v2sfm {

struct SampleResult {
    Tensor values;  // [C,Hc,Wc]
    Tensor mask;    // [Hc,Wc], constant 0/1
};

// coords[0] = x (column, pixel units), coords[1] = y (row).
inline SampleResult bilinear_sample(const Tensor& field, const Tensor& coords) {
    if (field.ndim() != 3) throw ShapeError("bilinear_sample: field must be [C,H,W]");
    if (coords.ndim() != 3 || coords.dim(0) != 2)
        throw ShapeError("bilinear_sample: coords must be [2,H,W], got " + shape_str(coords.shape()));
    const int c = field.dim(0), h = field.dim(1), w = field.dim(2);
    const int hc = coords.dim(1), wc = coords.dim(2);
    const std::int64_t npix = static_cast<std::int64_t>(hc) * wc;

    const bool rg = field.requires_grad() || coords.requires_grad();
    Tensor out = detail::make_result({c, hc, wc}, rg);
    Tensor mask = Tensor::zeros({hc, wc});

    const double* px = coords.values().data();
    const double* py = px + npix;
    const double* pf = field.values().data();
    double* po = out.raw_values().data();
    double* pm = mask.raw_values().data();
    const bool tracing = branch_tracing();

    for (std::int64_t p = 0; p < npix; ++p) {
        const double u = px[p];
        const double v = py[p];
        const int x0 = static_cast<int>(std::floor(u));
        const int y0 = static_cast<int>(std::floor(v));
        const double fx = u - x0;
        const double fy = v - y0;
        const bool in_bounds = (u >= 0.0 && u <= w - 1 && v >= 0.0 && v <= h - 1);
        pm[p] = in_bounds ? 1.0 : 0.0;
        if (tracing) {
            trace_branch(static_cast<std::uint64_t>(x0 + (1 << 20)));
            trace_branch(static_cast<std::uint64_t>(y0 + (1 << 20)));
            trace_branch(in_bounds ? 1u : 0u);
        }
        const bool x0_ok = x0 >= 0 && x0 < w;
        const bool x1_ok = x0 + 1 >= 0 && x0 + 1 < w;
        const bool y0_ok = y0 >= 0 && y0 < h;
        const bool y1_ok = y0 + 1 >= 0 && y0 + 1 < h;
        const double w00 = (1.0 - fx) * (1.0 - fy);
        const double w01 = fx * (1.0 - fy);
        const double w10 = (1.0 - fx) * fy;
        const double w11 = fx * fy;
        for (int ch = 0; ch < c; ++ch) {
            const double* plane = pf + static_cast<std::size_t>(ch) * h * w;
            double acc = 0.0;
            if (y0_ok && x0_ok) acc += w00 * plane[static_cast<std::size_t>(y0) * w + x0];
            if (y0_ok && x1_ok) acc += w01 * plane[static_cast<std::size_t>(y0) * w + x0 + 1];
            if (y1_ok && x0_ok) acc += w10 * plane[static_cast<std::size_t>(y0 + 1) * w + x0];
            if (y1_ok && x1_ok) acc += w11 * plane[static_cast<std::size_t>(y0 + 1) * w + x0 + 1];
            po[static_cast<std::size_t>(ch) * npix + p] = acc;
        }
    }
    detail::check_finite(out.values(), "bilinear_sample");

    if (detail::recording(rg)) {
        auto fn = field.node();
        auto cn = coords.node();
        auto on = out.node();
        Tape::active()->record([fn, cn, on, c, h, w, npix] {
            if (on->g.empty()) return;
            const double* px2 = cn->v.data();
            const double* py2 = px2 + npix;
            const double* pf2 = fn->v.data();
            const double* g = on->g.data();
            if (fn->requires_grad) fn->ensure_grad();
            if (cn->requires_grad) cn->ensure_grad();
            for (std::int64_t p = 0; p < npix; ++p) {
                const double u = px2[p];
                const double v = py2[p];
                const int x0 = static_cast<int>(std::floor(u));
                const int y0 = static_cast<int>(std::floor(v));
                const double fx = u - x0;
                const double fy = v - y0;
                const bool x0_ok = x0 >= 0 && x0 < w;
                const bool x1_ok = x0 + 1 >= 0 && x0 + 1 < w;
                const bool y0_ok = y0 >= 0 && y0 < h;
                const bool y1_ok = y0 + 1 >= 0 && y0 + 1 < h;
                double du = 0.0, dv = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double gv = g[static_cast<std::size_t>(ch) * npix + p];
                    if (gv == 0.0 && !cn->requires_grad) continue;
                    const double* plane = pf2 + static_cast<std::size_t>(ch) * h * w;
                    const double f00 = (y0_ok && x0_ok) ? plane[static_cast<std::size_t>(y0) * w + x0] : 0.0;
                    const double f01 = (y0_ok && x1_ok) ? plane[static_cast<std::size_t>(y0) * w + x0 + 1] : 0.0;
                    const double f10 = (y1_ok && x0_ok) ? plane[static_cast<std::size_t>(y0 + 1) * w + x0] : 0.0;
                    const double f11 = (y1_ok && x1_ok) ? plane[static_cast<std::size_t>(y0 + 1) * w + x0 + 1] : 0.0;
                    if (fn->requires_grad) {
                        double* gplane = fn->g.data() + static_cast<std::size_t>(ch) * h * w;
                        if (y0_ok && x0_ok) gplane[static_cast<std::size_t>(y0) * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                        if (y0_ok && x1_ok) gplane[static_cast<std::size_t>(y0) * w + x0 + 1] += gv * fx * (1.0 - fy);
                        if (y1_ok && x0_ok) gplane[static_cast<std::size_t>(y0 + 1) * w + x0] += gv * (1.0 - fx) * fy;
                        if (y1_ok && x1_ok) gplane[static_cast<std::size_t>(y0 + 1) * w + x0 + 1] += gv * fx * fy;
                    }
                    if (cn->requires_grad) {
                        du += gv * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
                        dv += gv * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
                    }
                }
                if (cn->requires_grad) {
                    cn->g[static_cast<std::size_t>(p)] += du;
                    cn->g[static_cast<std::size_t>(npix + p)] += dv;
                }
            }
        });
    }
    return {out, mask};
}

}  // namespace v2sfm
