#pragma once

// Pinhole camera model, 6-DoF pose algebra, and differentiable view
// synthesis. Camera frame: x right, y down, z forward; depth is the camera
// z coordinate. Euler convention is intrinsic X-Y-Z (roll-pitch-yaw),
// R = Rz(yaw) * Ry(pitch) * Rx(roll), radians.
//
// Two warp paths share the same math: a plain-value path over DepthMap /
// TransformSE3 (generators, evaluation, oracle tests) and a tensor path that
// differentiates through depth and the six pose components (training).

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "v2sfm/array.hpp"
#include "v2sfm/ops.hpp"
#include "v2sfm/sample.hpp"

namespace v2sfm {

struct Intrinsics {
    double fx = 0.0, fy = 0.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;

    void validate() const {
        if (fx <= 0.0 || fy <= 0.0)
            throw ValidationError("Intrinsics: focal lengths must be positive");
        if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
            throw ValidationError("Intrinsics: principal point outside image");
    }
};

struct Pose6 {
    double tx = 0.0, ty = 0.0, tz = 0.0;
    double roll = 0.0, pitch = 0.0, yaw = 0.0;
};

struct TransformSE3 {
    // row-major 4x4
    std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

    static TransformSE3 identity() { return {}; }

    double at(int r, int c) const { return m[static_cast<std::size_t>(r) * 4 + c]; }
    double& at(int r, int c) { return m[static_cast<std::size_t>(r) * 4 + c]; }

    TransformSE3 operator*(const TransformSE3& o) const {
        TransformSE3 out;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 4; ++k) acc += at(r, k) * o.at(k, c);
                out.at(r, c) = acc;
            }
        return out;
    }

    // Rigid inverse: [R t]^-1 = [R^T  -R^T t]
    TransformSE3 inverse() const {
        TransformSE3 out;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) out.at(r, c) = at(c, r);
        for (int r = 0; r < 3; ++r) {
            double acc = 0.0;
            for (int c = 0; c < 3; ++c) acc += at(c, r) * at(c, 3);
            out.at(r, 3) = -acc;
        }
        out.at(3, 0) = out.at(3, 1) = out.at(3, 2) = 0.0;
        out.at(3, 3) = 1.0;
        return out;
    }

    std::array<double, 3> apply(const std::array<double, 3>& p) const {
        std::array<double, 3> out{};
        for (int r = 0; r < 3; ++r)
            out[static_cast<std::size_t>(r)] =
                at(r, 0) * p[0] + at(r, 1) * p[1] + at(r, 2) * p[2] + at(r, 3);
        return out;
    }

    bool is_identity() const {
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c)
                if (at(r, c) != (r == c ? 1.0 : 0.0)) return false;
        return true;
    }

    void validate(double tol = 1e-9) const {
        if (at(3, 0) != 0.0 || at(3, 1) != 0.0 || at(3, 2) != 0.0 || at(3, 3) != 1.0)
            throw ValidationError("TransformSE3: bottom row must be [0,0,0,1]");
        // ||R^T R - I||_inf
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int k = 0; k < 3; ++k) acc += at(k, r) * at(k, c);
                if (std::abs(acc - (r == c ? 1.0 : 0.0)) > tol)
                    throw ValidationError("TransformSE3: rotation not orthonormal");
            }
        const double det =
            at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) -
            at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0)) +
            at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0));
        if (det <= 0.0) throw ValidationError("TransformSE3: det(R) must be positive");
    }
};

inline TransformSE3 pose_to_matrix(const Pose6& p) {
    const double cr = std::cos(p.roll), sr = std::sin(p.roll);
    const double cp = std::cos(p.pitch), sp = std::sin(p.pitch);
    const double cy = std::cos(p.yaw), sy = std::sin(p.yaw);
    TransformSE3 t;
    t.at(0, 0) = cy * cp;
    t.at(0, 1) = cy * sp * sr - sy * cr;
    t.at(0, 2) = cy * sp * cr + sy * sr;
    t.at(1, 0) = sy * cp;
    t.at(1, 1) = sy * sp * sr + cy * cr;
    t.at(1, 2) = sy * sp * cr - cy * sr;
    t.at(2, 0) = -sp;
    t.at(2, 1) = cp * sr;
    t.at(2, 2) = cp * cr;
    t.at(0, 3) = p.tx;
    t.at(1, 3) = p.ty;
    t.at(2, 3) = p.tz;
    return t;
}

inline Pose6 matrix_to_pose(const TransformSE3& t) {
    double s = -t.at(2, 0);
    if (s > 1.0) s = 1.0;
    if (s < -1.0) s = -1.0;
    const double pitch = std::asin(s);
    if (std::abs(pitch) > M_PI / 2.0 - 1e-6)
        throw DegeneratePoseError("matrix_to_pose: pitch at gimbal lock");
    Pose6 p;
    p.pitch = pitch;
    p.roll = std::atan2(t.at(2, 1), t.at(2, 2));
    p.yaw = std::atan2(t.at(1, 0), t.at(0, 0));
    p.tx = t.at(0, 3);
    p.ty = t.at(1, 3);
    p.tz = t.at(2, 3);
    return p;
}

struct DepthMap {
    int height = 0, width = 0;
    std::vector<double> values;           // z-depth per pixel, row-major
    std::vector<std::uint8_t> valid;      // optional; empty means all valid

    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * width + j]; }

    void validate(double d_min, double d_max) const {
        if (static_cast<int>(values.size()) != height * width)
            throw ValidationError("DepthMap: size mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!valid.empty() && !valid[i]) continue;
            if (!(values[i] >= d_min && values[i] <= d_max))
                throw ValidationError("DepthMap: depth outside [" + std::to_string(d_min) +
                                      ", " + std::to_string(d_max) + "]");
        }
    }
};

inline std::array<double, 3> backproject(double u, double v, double depth, const Intrinsics& k) {
    if (depth <= 0.0) throw ValidationError("backproject: depth must be positive");
    return {depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth};
}

struct Projection {
    double u = 0.0, v = 0.0, z = 0.0;
    bool in_front = false;  // z above the behind-camera threshold
};

inline Projection project(const std::array<double, 3>& p, const Intrinsics& k) {
    Projection out;
    out.z = p[2];
    out.in_front = p[2] >= 1e-6;
    const double zs = out.in_front ? p[2] : 1e-6;
    out.u = k.fx * p[0] / zs + k.cx;
    out.v = k.fy * p[1] / zs + k.cy;
    return out;
}

// Plain-value warp: for every target pixel, the source-frame sample
// coordinates, projected depth, and validity.
struct WarpField {
    Tensor coords;  // [2,H,W]: x plane then y plane
    Tensor z_proj;  // [H,W]
    Tensor mask;    // [H,W] 0/1: in-bounds and in front
};

inline WarpField warp_coords(const DepthMap& depth, const TransformSE3& t, const Intrinsics& k) {
    if (depth.width != k.width || depth.height != k.height)
        throw ValidationError("warp_coords: depth map does not match intrinsics size");
    const int h = depth.height, w = depth.width;
    WarpField out;
    out.coords = Tensor::zeros({2, h, w});
    out.z_proj = Tensor::zeros({h, w});
    out.mask = Tensor::zeros({h, w});
    double* pu = out.coords.raw_values().data();
    double* pv = pu + static_cast<std::size_t>(h) * w;
    double* pz = out.z_proj.raw_values().data();
    double* pm = out.mask.raw_values().data();

    if (t.is_identity()) {
        // Identity motion maps every pixel onto itself; emit the grid
        // bit-exactly rather than round-tripping through the projection.
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t p = static_cast<std::size_t>(i) * w + j;
                pu[p] = j;
                pv[p] = i;
                pz[p] = depth.at(i, j);
                pm[p] = 1.0;
            }
        return out;
    }

    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * w + j;
            const auto pt = t.apply(backproject(j, i, depth.at(i, j), k));
            const Projection pr = project(pt, k);
            pu[p] = pr.u;
            pv[p] = pr.v;
            pz[p] = pr.z;
            const bool inb = pr.in_front && pr.u >= 0.0 && pr.u <= w - 1 && pr.v >= 0.0 &&
                             pr.v <= h - 1;
            pm[p] = inb ? 1.0 : 0.0;
        }
    return out;
}

// Warped view: sample the source image at the warp coordinates, zeroed
// outside the combined validity mask.
inline Tensor synthesize_view(const Tensor& src_image, const Tensor& coords, const Tensor& mask) {
    SampleResult s = bilinear_sample(src_image, coords);
    Tensor combined = mul(s.mask, mask);
    return mul(s.values, combined);
}

// Depth of the target frame's points expressed in the source camera frame,
// laid out on the target pixel grid.
inline Tensor project_depth(const DepthMap& depth, const TransformSE3& t, const Intrinsics& k) {
    return warp_coords(depth, t, k).z_proj;
}

// ---------------------------------------------------------------------------
// Differentiable path
// ---------------------------------------------------------------------------

// Rotation/translation entries of pose_to_matrix built as scalar tensors so
// gradients reach all six pose components.
struct PoseEntries {
    Tensor r[9];  // row-major 3x3, each [1]
    Tensor t[3];
};

inline PoseEntries pose_entries(const Tensor& pose6) {
    if (pose6.size() != 6) throw ShapeError("pose_entries: expected 6 components");
    Tensor roll = slice0(pose6, 3, 4), pitch = slice0(pose6, 4, 5), yaw = slice0(pose6, 5, 6);
    Tensor cr = cos_t(roll), sr = sin_t(roll);
    Tensor cp = cos_t(pitch), sp = sin_t(pitch);
    Tensor cy = cos_t(yaw), sy = sin_t(yaw);
    PoseEntries e;
    e.r[0] = mul(cy, cp);
    e.r[1] = sub(mul(mul(cy, sp), sr), mul(sy, cr));
    e.r[2] = add(mul(mul(cy, sp), cr), mul(sy, sr));
    e.r[3] = mul(sy, cp);
    e.r[4] = add(mul(mul(sy, sp), sr), mul(cy, cr));
    e.r[5] = sub(mul(mul(sy, sp), cr), mul(cy, sr));
    e.r[6] = neg(sp);
    e.r[7] = mul(cp, sr);
    e.r[8] = mul(cp, cr);
    e.t[0] = slice0(pose6, 0, 1);
    e.t[1] = slice0(pose6, 1, 2);
    e.t[2] = slice0(pose6, 2, 3);
    return e;
}

struct WarpFieldAd {
    Tensor coords;  // [2,H,W], differentiable
    Tensor z_proj;  // [H,W], differentiable
    Tensor mask;    // [H,W], constant
};

// Differentiable warp of a [H,W] depth tensor through a pose expressed as
// tensor entries. Behind-camera pixels are masked, with the projection
// division floored so no exception interrupts training.
inline WarpFieldAd warp_coords_ad(const Tensor& depth, const PoseEntries& e, const Intrinsics& k) {
    if (depth.ndim() != 2 || depth.dim(0) != k.height || depth.dim(1) != k.width)
        throw ShapeError("warp_coords_ad: depth " + shape_str(depth.shape()) +
                         " does not match intrinsics");
    const int h = k.height, w = k.width;
    Tensor ax = Tensor::zeros({h, w});
    Tensor ay = Tensor::zeros({h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            ax.raw_values()[static_cast<std::size_t>(i) * w + j] = (j - k.cx) / k.fx;
            ay.raw_values()[static_cast<std::size_t>(i) * w + j] = (i - k.cy) / k.fy;
        }
    Tensor x = mul(depth, ax);
    Tensor y = mul(depth, ay);
    const Tensor& z = depth;

    Tensor xc = add(add(mul(x, e.r[0]), mul(y, e.r[1])), add(mul(z, e.r[2]), e.t[0]));
    Tensor yc = add(add(mul(x, e.r[3]), mul(y, e.r[4])), add(mul(z, e.r[5]), e.t[1]));
    Tensor zc = add(add(mul(x, e.r[6]), mul(y, e.r[7])), add(mul(z, e.r[8]), e.t[2]));

    Tensor z_safe = clamp_min(zc, 1e-6);
    Tensor u = add_scalar(mul_scalar(divide(xc, z_safe), k.fx), k.cx);
    Tensor v = add_scalar(mul_scalar(divide(yc, z_safe), k.fy), k.cy);

    WarpFieldAd out;
    out.coords = concat0({reshape(u, {1, h, w}), reshape(v, {1, h, w})});
    out.z_proj = zc;
    out.mask = Tensor::zeros({h, w});
    const double* puv = u.values().data();
    const double* pvv = v.values().data();
    const double* pzv = zc.values().data();
    double* pm = out.mask.raw_values().data();
    const bool tracing = branch_tracing();
    for (std::int64_t i = 0; i < out.mask.size(); ++i) {
        const bool inb = pzv[i] > 1e-6 && puv[i] >= 0.0 && puv[i] <= w - 1 &&
                         pvv[i] >= 0.0 && pvv[i] <= h - 1;
        pm[static_cast<std::size_t>(i)] = inb ? 1.0 : 0.0;
        if (tracing) trace_branch(inb ? 1u : 0u);
    }
    return out;
}

}  // namespace v2sfm
