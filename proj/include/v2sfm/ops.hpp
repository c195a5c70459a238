#pragma once

// Array-level primitive operations with reverse-mode gradients. Every op
// validates shapes, checks the result for non-finite values, and appends one
// backward closure to the active tape when an input requires gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "v2sfm/array.hpp"

namespace v2sfm {

enum class OpKind { Add, Sub, Mul, Div, Exp, Log, Abs, Relu, Sigmoid, Tanh, Pow2, Sqrt };

namespace detail {

// Trailing-dimension broadcast: shapes are right-aligned, each pair of dims
// must match or one of them must be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t na = a.size(), nb = b.size();
    const std::size_t n = std::max(na, nb);
    Shape out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const int da = i < na ? a[na - 1 - i] : 1;
        const int db = i < nb ? b[nb - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) +
                             " and " + shape_str(b) + " not broadcastable");
        out[n - 1 - i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` right-aligned into an `n`-dim output; 0 where broadcast.
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> st(out.size(), 0);
    std::int64_t stride = 1;
    const std::size_t off = out.size() - s.size();
    for (std::size_t i = s.size(); i-- > 0;) {
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : stride;
        stride *= s[i];
    }
    return st;
}

// Reduce a gradient of `out_shape` back onto `in_shape` by summing the
// broadcast dimensions. `g` has numel(out_shape) entries; result is added
// into `dst` which has numel(in_shape) entries.
inline void reduce_broadcast(const double* g, const Shape& out_shape,
                             const Shape& in_shape, double* dst) {
    const std::int64_t n_out = numel(out_shape);
    const std::int64_t n_in = numel(in_shape);
    if (n_out == n_in && out_shape.size() == in_shape.size()) {
        for (std::int64_t i = 0; i < n_out; ++i) dst[i] += g[i];
        return;
    }
    if (n_in == 1) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n_out; ++i) acc += g[i];
        dst[0] += acc;
        return;
    }
    const auto st = broadcast_strides(in_shape, out_shape);
    const std::size_t nd = out_shape.size();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t in_off = 0;
    for (std::int64_t i = 0; i < n_out; ++i) {
        dst[in_off] += g[i];
        for (std::size_t d = nd; d-- > 0;) {
            idx[d]++;
            in_off += st[d];
            if (idx[d] < out_shape[d]) break;
            in_off -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

template <typename F>
inline void binary_loop(const Tensor& a, const Tensor& b, Tensor& out, F&& f) {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.raw_values().data();
    const std::int64_t n = out.size();
    if (same_shape(a.shape(), b.shape())) {
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    } else if (b.size() == 1) {
        const double s = pb[0];
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], s);
    } else if (a.size() == 1) {
        const double s = pa[0];
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(s, pb[i]);
    } else {
        const Shape& os = out.shape();
        const auto sa = broadcast_strides(a.shape(), os);
        const auto sb = broadcast_strides(b.shape(), os);
        const std::size_t nd = os.size();
        std::vector<std::int64_t> idx(nd, 0);
        std::int64_t ia = 0, ib = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            po[i] = f(pa[ia], pb[ib]);
            for (std::size_t d = nd; d-- > 0;) {
                idx[d]++;
                ia += sa[d];
                ib += sb[d];
                if (idx[d] < os[d]) break;
                ia -= sa[d] * os[d];
                ib -= sb[d] * os[d];
                idx[d] = 0;
            }
        }
    }
}

// Elementwise product of grad with a per-output factor derived from a and b,
// then broadcast-reduced onto the input's shape.
template <typename F>
inline void binary_backward_into(const Tensor& out_g_holder,
                                 const std::vector<double>& gout,
                                 const Tensor& a, const Tensor& b,
                                 const Shape& target_shape, double* dst, F&& factor) {
    const Shape& os = out_g_holder.shape();
    const std::int64_t n = numel(os);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    // Fast paths: no broadcasting, or one side scalar.
    if (same_shape(a.shape(), b.shape()) && same_shape(target_shape, os)) {
        for (std::int64_t i = 0; i < n; ++i)
            dst[i] += gout[static_cast<std::size_t>(i)] * factor(pa[i], pb[i]);
        return;
    }
    if (b.size() == 1 && same_shape(target_shape, os)) {
        const double s = pb[0];
        for (std::int64_t i = 0; i < n; ++i)
            dst[i] += gout[static_cast<std::size_t>(i)] * factor(pa[i], s);
        return;
    }
    if (a.size() == 1 && same_shape(target_shape, os)) {
        const double s = pa[0];
        for (std::int64_t i = 0; i < n; ++i)
            dst[i] += gout[static_cast<std::size_t>(i)] * factor(s, pb[i]);
        return;
    }
    std::vector<double> tmp(static_cast<std::size_t>(n));
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const std::size_t nd = os.size();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        tmp[static_cast<std::size_t>(i)] = gout[static_cast<std::size_t>(i)] * factor(pa[ia], pb[ib]);
        for (std::size_t d = nd; d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < os[d]) break;
            ia -= sa[d] * os[d];
            ib -= sb[d] * os[d];
            idx[d] = 0;
        }
    }
    reduce_broadcast(tmp.data(), os, target_shape, dst);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape(), "add");
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = detail::make_result(os, rg);
    detail::binary_loop(a, b, out, [](double x, double y) { return x + y; });
    detail::check_finite(out.values(), "add");
    if (detail::recording(rg)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            if (on->g.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::reduce_broadcast(on->g.data(), on->shape, an->shape, an->g.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::reduce_broadcast(on->g.data(), on->shape, bn->shape, bn->g.data());
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape(), "sub");
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = detail::make_result(os, rg);
    detail::binary_loop(a, b, out, [](double x, double y) { return x - y; });
    detail::check_finite(out.values(), "sub");
    if (detail::recording(rg)) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            if (on->g.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::reduce_broadcast(on->g.data(), on->shape, an->shape, an->g.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                std::vector<double> neg(on->g.size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -on->g[i];
                detail::reduce_broadcast(neg.data(), on->shape, bn->shape, bn->g.data());
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape(), "mul");
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = detail::make_result(os, rg);
    detail::binary_loop(a, b, out, [](double x, double y) { return x * y; });
    detail::check_finite(out.values(), "mul");
    if (detail::recording(rg)) {
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc] {
            auto on = oc.node();
            if (on->g.empty()) return;
            if (ac.requires_grad()) {
                auto an = ac.node();
                an->ensure_grad();
                detail::binary_backward_into(oc, on->g, ac, bc, an->shape, an->g.data(),
                                             [](double, double y) { return y; });
            }
            if (bc.requires_grad()) {
                auto bn = bc.node();
                bn->ensure_grad();
                detail::binary_backward_into(oc, on->g, ac, bc, bn->shape, bn->g.data(),
                                             [](double x, double) { return x; });
            }
        });
    }
    return out;
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    Shape os = detail::broadcast_shape(a.shape(), b.shape(), "div");
    // Guard: divisions this close to zero indicate a programming error
    // upstream (all intended small denominators carry their own floors).
    {
        const double* pb = b.values().data();
        for (std::int64_t i = 0; i < b.size(); ++i) {
            if (std::abs(pb[i]) < 1e-12)
                throw NumericalError("div: |denominator| < 1e-12 at flat index " +
                                     std::to_string(i));
        }
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor out = detail::make_result(os, rg);
    detail::binary_loop(a, b, out, [](double x, double y) { return x / y; });
    detail::check_finite(out.values(), "div");
    if (detail::recording(rg)) {
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc] {
            auto on = oc.node();
            if (on->g.empty()) return;
            if (ac.requires_grad()) {
                auto an = ac.node();
                an->ensure_grad();
                detail::binary_backward_into(oc, on->g, ac, bc, an->shape, an->g.data(),
                                             [](double, double y) { return 1.0 / y; });
            }
            if (bc.requires_grad()) {
                auto bn = bc.node();
                bn->ensure_grad();
                detail::binary_backward_into(oc, on->g, ac, bc, bn->shape, bn->g.data(),
                                             [](double x, double y) { return -x / (y * y); });
            }
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor mul_scalar(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename FwdF, typename BwdFactorF>
inline Tensor unary_op(const Tensor& a, const char* name, FwdF fwd, BwdFactorF bwd_factor) {
    const bool rg = a.requires_grad();
    Tensor out = make_result(a.shape(), rg);
    const double* pa = a.values().data();
    double* po = out.raw_values().data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    check_finite(out.values(), name);
    if (recording(rg)) {
        Tensor ac = a, oc = out;
        Tape::active()->record([ac, oc, bwd_factor] {
            auto on = oc.node();
            if (on->g.empty()) return;
            auto an = ac.node();
            an->ensure_grad();
            const double* pav = an->v.data();
            const double* pov = on->v.data();
            const double* pg = on->g.data();
            double* pga = an->g.data();
            const std::int64_t m = static_cast<std::int64_t>(an->v.size());
            for (std::int64_t i = 0; i < m; ++i)
                pga[i] += pg[i] * bwd_factor(pav[i], pov[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(a, "neg", [](double x) { return -x; },
                            [](double, double) { return -1.0; });
}

inline Tensor exp_t(const Tensor& a) {
    return detail::unary_op(a, "exp", [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& a) {
    for (double x : a.values())
        if (x <= 0.0) throw NumericalError("log: non-positive argument");
    return detail::unary_op(a, "log", [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

inline Tensor abs_t(const Tensor& a) {
    if (branch_tracing())
        for (double x : a.values()) trace_branch(x > 0.0 ? 2u : (x < 0.0 ? 1u : 0u));
    return detail::unary_op(a, "abs", [](double x) { return std::abs(x); },
                            [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor relu(const Tensor& a) {
    if (branch_tracing())
        for (double x : a.values()) trace_branch(x > 0.0 ? 1u : 0u);
    return detail::unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                       : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_t(const Tensor& a) {
    return detail::unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                            [](double, double y) { return 1.0 - y * y; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(a, "pow2", [](double x) { return x * x; },
                            [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt_t(const Tensor& a) {
    for (double x : a.values())
        if (x < 0.0) throw NumericalError("sqrt: negative argument");
    return detail::unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor sin_t(const Tensor& a) {
    return detail::unary_op(a, "sin", [](double x) { return std::sin(x); },
                            [](double x, double) { return std::cos(x); });
}

inline Tensor cos_t(const Tensor& a) {
    return detail::unary_op(a, "cos", [](double x) { return std::cos(x); },
                            [](double x, double) { return -std::sin(x); });
}

// Gradient passes only through the interior; saturated entries are traced as
// branch decisions for the finite-difference excluder.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (branch_tracing())
        for (double x : a.values()) trace_branch(x < lo ? 0u : (x > hi ? 2u : 1u));
    return detail::unary_op(
        a, "clamp",
        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
    if (branch_tracing())
        for (double x : a.values()) trace_branch(x < lo ? 0u : 1u);
    return detail::unary_op(a, "clamp_min",
                            [lo](double x) { return x < lo ? lo : x; },
                            [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

// Spec-facing dispatch over the registered elementwise kinds.
inline Tensor elementwise(OpKind kind, const Tensor& a,
                          const std::optional<Tensor>& b = std::nullopt) {
    auto need_b = [&]() -> const Tensor& {
        if (!b) throw ValidationError("elementwise: binary op requires second input");
        return *b;
    };
    switch (kind) {
        case OpKind::Add: return add(a, need_b());
        case OpKind::Sub: return sub(a, need_b());
        case OpKind::Mul: return mul(a, need_b());
        case OpKind::Div: return divide(a, need_b());
        case OpKind::Exp: return exp_t(a);
        case OpKind::Log: return log_t(a);
        case OpKind::Abs: return abs_t(a);
        case OpKind::Relu: return relu(a);
        case OpKind::Sigmoid: return sigmoid(a);
        case OpKind::Tanh: return tanh_t(a);
        case OpKind::Pow2: return square(a);
        case OpKind::Sqrt: return sqrt_t(a);
    }
    throw ValidationError("elementwise: unknown op kind");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    const bool rg = a.requires_grad();
    Tensor out = detail::make_result({1}, rg);
    double acc = 0.0;
    for (double x : a.values()) acc += x;
    out.raw_values()[0] = acc;
    detail::check_finite(out.values(), "sum");
    if (detail::recording(rg)) {
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (on->g.empty()) return;
            an->ensure_grad();
            const double g = on->g[0];
            for (double& x : an->g) x += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Per-row mean of a 2-D array: [C,T] -> [C].
inline Tensor row_mean(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("row_mean: expected 2-D, got " + shape_str(a.shape()));
    const int c = a.dim(0), t = a.dim(1);
    const bool rg = a.requires_grad();
    Tensor out = detail::make_result({c}, rg);
    const double* pa = a.values().data();
    double* po = out.raw_values().data();
    for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        for (int j = 0; j < t; ++j) acc += pa[i * t + j];
        po[i] = acc / t;
    }
    detail::check_finite(out.values(), "row_mean");
    if (detail::recording(rg)) {
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c, t] {
            if (on->g.empty()) return;
            an->ensure_grad();
            for (int i = 0; i < c; ++i) {
                const double g = on->g[static_cast<std::size_t>(i)] / t;
                for (int j = 0; j < t; ++j) an->g[static_cast<std::size_t>(i * t + j)] += g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = W x, W:[m,n], x:[n] -> [m]
inline Tensor matvec(const Tensor& w, const Tensor& x) {
    if (w.ndim() != 2 || x.ndim() != 1 || w.dim(1) != x.dim(0))
        throw ShapeError("matvec: " + shape_str(w.shape()) + " x " + shape_str(x.shape()));
    const int m = w.dim(0), n = w.dim(1);
    const bool rg = w.requires_grad() || x.requires_grad();
    Tensor out = detail::make_result({m}, rg);
    const double* pw = w.values().data();
    const double* px = x.values().data();
    double* po = out.raw_values().data();
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = pw + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += row[j] * px[j];
        po[i] = acc;
    }
    detail::check_finite(out.values(), "matvec");
    if (detail::recording(rg)) {
        auto wn = w.node(), xn = x.node(), on = out.node();
        Tape::active()->record([wn, xn, on, m, n] {
            if (on->g.empty()) return;
            const double* g = on->g.data();
            if (wn->requires_grad) {
                wn->ensure_grad();
                const double* px = xn->v.data();
                for (int i = 0; i < m; ++i) {
                    double* row = wn->g.data() + static_cast<std::size_t>(i) * n;
                    const double gi = g[i];
                    for (int j = 0; j < n; ++j) row[j] += gi * px[j];
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                const double* pw = wn->v.data();
                for (int i = 0; i < m; ++i) {
                    const double gi = g[i];
                    const double* row = pw + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) xn->g[static_cast<std::size_t>(j)] += gi * row[j];
                }
            }
        });
    }
    return out;
}

inline Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b) {
    return add(matvec(w, x), b);
}

// ---------------------------------------------------------------------------
// Structure: reshape / concat / slice / gather
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    const bool rg = a.requires_grad();
    Tensor out = detail::make_result(new_shape, rg);
    std::copy(a.values().begin(), a.values().end(), out.raw_values().begin());
    if (detail::recording(rg)) {
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            if (on->g.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < an->g.size(); ++i) an->g[i] += on->g[i];
        });
    }
    return out;
}

// Concatenate along the first axis; trailing dims must match.
inline Tensor concat0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape trail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total0 = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != trail) throw ShapeError("concat0: trailing dims differ");
        total0 += p.dim(0);
        rg = rg || p.requires_grad();
    }
    Shape os = parts[0].shape();
    os[0] = total0;
    Tensor out = detail::make_result(os, rg);
    double* po = out.raw_values().data();
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.values().begin(), p.values().end(), po + off);
        off += p.size();
    }
    if (detail::recording(rg)) {
        std::vector<detail::NodePtr> nodes;
        for (const Tensor& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        Tape::active()->record([nodes, on] {
            if (on->g.empty()) return;
            std::int64_t off2 = 0;
            for (const auto& np : nodes) {
                const std::int64_t sz = static_cast<std::int64_t>(np->v.size());
                if (np->requires_grad) {
                    np->ensure_grad();
                    for (std::int64_t i = 0; i < sz; ++i)
                        np->g[static_cast<std::size_t>(i)] += on->g[static_cast<std::size_t>(off2 + i)];
                }
                off2 += sz;
            }
        });
    }
    return out;
}

// Rows [lo, hi) of the first axis.
inline Tensor slice0(const Tensor& a, int lo, int hi) {
    if (a.ndim() < 1 || lo < 0 || hi > a.dim(0) || lo >= hi)
        throw ShapeError("slice0: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                         ") of " + shape_str(a.shape()));
    Shape os = a.shape();
    os[0] = hi - lo;
    const std::int64_t row = a.size() / a.dim(0);
    const bool rg = a.requires_grad();
    Tensor out = detail::make_result(os, rg);
    std::copy(a.values().begin() + lo * row, a.values().begin() + hi * row,
              out.raw_values().begin());
    if (detail::recording(rg)) {
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, lo, row] {
            if (on->g.empty()) return;
            an->ensure_grad();
            const std::size_t base = static_cast<std::size_t>(lo * row);
            for (std::size_t i = 0; i < on->g.size(); ++i) an->g[base + i] += on->g[i];
        });
    }
    return out;
}

// Column t of a [C,T] array -> [C].
inline Tensor col(const Tensor& a, int t) {
    if (a.ndim() != 2 || t < 0 || t >= a.dim(1))
        throw ShapeError("col: index " + std::to_string(t) + " of " + shape_str(a.shape()));
    const int c = a.dim(0), T = a.dim(1);
    const bool rg = a.requires_grad();
    Tensor out = detail::make_result({c}, rg);
    const double* pa = a.values().data();
    double* po = out.raw_values().data();
    for (int i = 0; i < c; ++i) po[i] = pa[static_cast<std::size_t>(i) * T + t];
    if (detail::recording(rg)) {
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c, T, t] {
            if (on->g.empty()) return;
            an->ensure_grad();
            for (int i = 0; i < c; ++i)
                an->g[static_cast<std::size_t>(i) * T + t] += on->g[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel helpers
// ---------------------------------------------------------------------------

// out[c, ...] = x[c, ...] * s[c]
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.ndim() < 1 || s.ndim() != 1 || s.dim(0) != x.dim(0))
        throw ShapeError("scale_rows: " + shape_str(x.shape()) + " by " + shape_str(s.shape()));
    const int c = x.dim(0);
    const std::int64_t row = x.size() / c;
    const bool rg = x.requires_grad() || s.requires_grad();
    Tensor out = detail::make_result(x.shape(), rg);
    const double* px = x.values().data();
    const double* ps = s.values().data();
    double* po = out.raw_values().data();
    for (int i = 0; i < c; ++i) {
        const double f = ps[i];
        const double* src = px + i * row;
        double* dst = po + i * row;
        for (std::int64_t j = 0; j < row; ++j) dst[j] = src[j] * f;
    }
    detail::check_finite(out.values(), "scale_rows");
    if (detail::recording(rg)) {
        auto xn = x.node(), sn = s.node(), on = out.node();
        Tape::active()->record([xn, sn, on, c, row] {
            if (on->g.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < c; ++i) {
                    const double f = sn->v[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < row; ++j)
                        xn->g[static_cast<std::size_t>(i * row + j)] +=
                            on->g[static_cast<std::size_t>(i * row + j)] * f;
                }
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (int i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < row; ++j)
                        acc += on->g[static_cast<std::size_t>(i * row + j)] *
                               xn->v[static_cast<std::size_t>(i * row + j)];
                    sn->g[static_cast<std::size_t>(i)] += acc;
                }
            }
        });
    }
    return out;
}

// out[c, ...] = x[c, ...] + b[c]
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() < 1 || b.ndim() != 1 || b.dim(0) != x.dim(0))
        throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int c = x.dim(0);
    const std::int64_t row = x.size() / c;
    const bool rg = x.requires_grad() || b.requires_grad();
    Tensor out = detail::make_result(x.shape(), rg);
    const double* px = x.values().data();
    const double* pb = b.values().data();
    double* po = out.raw_values().data();
    for (int i = 0; i < c; ++i) {
        const double f = pb[i];
        for (std::int64_t j = 0; j < row; ++j) po[i * row + j] = px[i * row + j] + f;
    }
    detail::check_finite(out.values(), "add_channel_bias");
    if (detail::recording(rg)) {
        auto xn = x.node(), bn = b.node(), on = out.node();
        Tape::active()->record([xn, bn, on, c, row] {
            if (on->g.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < on->g.size(); ++i) xn->g[i] += on->g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < row; ++j)
                        acc += on->g[static_cast<std::size_t>(i * row + j)];
                    bn->g[static_cast<std::size_t>(i)] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial ops shared by networks and losses
// ---------------------------------------------------------------------------

// Nearest-neighbor 2x upsample of [C,H,W].
inline Tensor upsample2x(const Tensor& x) {
    if (x.ndim() != 3) throw ShapeError("upsample2x: expected [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const bool rg = x.requires_grad();
    Tensor out = detail::make_result({c, 2 * h, 2 * w}, rg);
    const double* px = x.values().data();
    double* po = out.raw_values().data();
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double v = px[(static_cast<std::size_t>(ch) * h + i) * w + j];
                const std::size_t b = (static_cast<std::size_t>(ch) * 2 * h + 2 * i) * 2 * w + 2 * j;
                po[b] = v;
                po[b + 1] = v;
                po[b + 2 * w] = v;
                po[b + 2 * w + 1] = v;
            }
    if (detail::recording(rg)) {
        auto xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, c, h, w] {
            if (on->g.empty()) return;
            xn->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const std::size_t b =
                            (static_cast<std::size_t>(ch) * 2 * h + 2 * i) * 2 * w + 2 * j;
                        xn->g[(static_cast<std::size_t>(ch) * h + i) * w + j] +=
                            on->g[b] + on->g[b + 1] + on->g[b + 2 * w] + on->g[b + 2 * w + 1];
                    }
        });
    }
    return out;
}

namespace detail {

// reflect-101: mirror about the edge sample, so index -1 maps to 1.
inline int reflect101(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

}  // namespace detail

// Uniform (box) filter over the last two dims with reflection padding.
inline Tensor box_filter(const Tensor& x, int window) {
    if (x.ndim() != 3) throw ShapeError("box_filter: expected [C,H,W]");
    if (window % 2 == 0 || window < 1) throw ShapeError("box_filter: window must be odd");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (window > h || window > w)
        throw ShapeError("box_filter: window " + std::to_string(window) +
                         " larger than image " + shape_str(x.shape()));
    const int r = window / 2;
    const double inv = 1.0 / (window * window);
    const bool rg = x.requires_grad();
    Tensor out = detail::make_result(x.shape(), rg);
    const double* px = x.values().data();
    double* po = out.raw_values().data();
    for (int ch = 0; ch < c; ++ch) {
        const double* src = px + static_cast<std::size_t>(ch) * h * w;
        double* dst = po + static_cast<std::size_t>(ch) * h * w;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int di = -r; di <= r; ++di) {
                    const int si = detail::reflect101(i + di, h);
                    for (int dj = -r; dj <= r; ++dj)
                        acc += src[static_cast<std::size_t>(si) * w + detail::reflect101(j + dj, w)];
                }
                dst[static_cast<std::size_t>(i) * w + j] = acc * inv;
            }
    }
    if (detail::recording(rg)) {
        auto xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, c, h, w, r, inv] {
            if (on->g.empty()) return;
            xn->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                const double* g = on->g.data() + static_cast<std::size_t>(ch) * h * w;
                double* gx = xn->g.data() + static_cast<std::size_t>(ch) * h * w;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double gv = g[static_cast<std::size_t>(i) * w + j] * inv;
                        for (int di = -r; di <= r; ++di) {
                            const int si = detail::reflect101(i + di, h);
                            for (int dj = -r; dj <= r; ++dj)
                                gx[static_cast<std::size_t>(si) * w + detail::reflect101(j + dj, w)] += gv;
                        }
                    }
            }
        });
    }
    return out;
}

namespace detail {

// Forward difference along the last (axis=1) or second-to-last (axis=0) dim;
// final row/column is zero so the shape is preserved.
inline Tensor forward_diff(const Tensor& x, int axis, const char* name) {
    if (x.ndim() < 2) throw ShapeError(std::string(name) + ": need at least 2 dims");
    const int w = x.dim(x.ndim() - 1);
    const int h = x.dim(x.ndim() - 2);
    const std::int64_t planes = x.size() / (static_cast<std::int64_t>(h) * w);
    const bool rg = x.requires_grad();
    Tensor out = make_result(x.shape(), rg);
    const double* px = x.values().data();
    double* po = out.raw_values().data();
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = px + p * h * w;
        double* dst = po + p * h * w;
        if (axis == 1) {
            for (int i = 0; i < h; ++i) {
                for (int j = 0; j + 1 < w; ++j)
                    dst[static_cast<std::size_t>(i) * w + j] =
                        src[static_cast<std::size_t>(i) * w + j + 1] - src[static_cast<std::size_t>(i) * w + j];
                dst[static_cast<std::size_t>(i) * w + w - 1] = 0.0;
            }
        } else {
            for (int i = 0; i + 1 < h; ++i)
                for (int j = 0; j < w; ++j)
                    dst[static_cast<std::size_t>(i) * w + j] =
                        src[static_cast<std::size_t>(i + 1) * w + j] - src[static_cast<std::size_t>(i) * w + j];
            for (int j = 0; j < w; ++j) dst[static_cast<std::size_t>(h - 1) * w + j] = 0.0;
        }
    }
    if (recording(rg)) {
        auto xn = x.node(), on = out.node();
        Tape::active()->record([xn, on, planes, h, w, axis] {
            if (on->g.empty()) return;
            xn->ensure_grad();
            for (std::int64_t p = 0; p < planes; ++p) {
                const double* g = on->g.data() + p * h * w;
                double* gx = xn->g.data() + p * h * w;
                if (axis == 1) {
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j + 1 < w; ++j) {
                            const double gv = g[static_cast<std::size_t>(i) * w + j];
                            gx[static_cast<std::size_t>(i) * w + j + 1] += gv;
                            gx[static_cast<std::size_t>(i) * w + j] -= gv;
                        }
                } else {
                    for (int i = 0; i + 1 < h; ++i)
                        for (int j = 0; j < w; ++j) {
                            const double gv = g[static_cast<std::size_t>(i) * w + j];
                            gx[static_cast<std::size_t>(i + 1) * w + j] += gv;
                            gx[static_cast<std::size_t>(i) * w + j] -= gv;
                        }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor fdiff_x(const Tensor& x) { return detail::forward_diff(x, 1, "fdiff_x"); }
inline Tensor fdiff_y(const Tensor& x) { return detail::forward_diff(x, 0, "fdiff_y"); }

// Mean of x over entries where mask > 0.5. The mask is a constant 0/1 map
// whose shape must equal x's shape or a trailing suffix of it (a [H,W] mask
// applies to every channel of a [C,H,W] map).
inline Tensor masked_mean(const Tensor& x, const Tensor& mask) {
    if (x.size() % mask.size() != 0)
        throw ShapeError("masked_mean: mask " + shape_str(mask.shape()) +
                         " does not tile " + shape_str(x.shape()));
    double count = 0.0;
    Tensor hard = Tensor::zeros(mask.shape());
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        const double on = mask.values()[static_cast<std::size_t>(i)] > 0.5 ? 1.0 : 0.0;
        hard.raw_values()[static_cast<std::size_t>(i)] = on;
        count += on;
    }
    count *= static_cast<double>(x.size() / mask.size());
    if (count < 1.0) throw ValidationError("masked_mean: empty mask");
    return mul_scalar(sum(mul(x, hard)), 1.0 / count);
}

}  // namespace v2sfm
