#pragma once

// Central finite-difference verification of reverse-mode gradients.
//
// The loss builder is re-run with each coordinate perturbed by +/-h. A
// forward pass records a hash of every discrete decision (activation signs,
// clamp saturations, interpolation cells, validity masks); when a perturbed
// pass takes a different branch than the base pass, the finite difference
// straddles a non-smooth locus and that coordinate is excluded and counted
// instead of compared.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "v2sfm/array.hpp"
#include "v2sfm/ops.hpp"
#include "v2sfm/rng.hpp"

namespace v2sfm {

struct GradCheckReport {
    double max_rel_error = 0.0;
    double base_value = 0.0;
    std::int64_t compared = 0;
    std::int64_t excluded = 0;   // kink-crossing coordinates
    std::string worst_leaf;
    std::int64_t worst_index = -1;
};

struct GradCheckOptions {
    double h = 1e-5;
    // Relative error denominator is max(scale_floor, |analytic|, |numeric|).
    double scale_floor = 1e-2;
    // Cap on coordinates probed per leaf; 0 means every coordinate.
    std::int64_t max_coords_per_leaf = 0;
    std::uint64_t sample_seed = 1;
};

struct NamedLeaf {
    std::string name;
    Tensor tensor;
};

// fn must rebuild the scalar loss from the leaves' current values on every
// call (and must not cache state between calls).
inline GradCheckReport grad_check(const std::function<Tensor()>& fn,
                                  const std::vector<NamedLeaf>& leaves,
                                  const GradCheckOptions& opt = {}) {
    if (opt.h < 1e-7 || opt.h > 1e-3)
        throw ValidationError("grad_check: h must lie in [1e-7, 1e-3]");

    GradCheckReport report;
    BranchTrace& trace = BranchTrace::current();

    // Base pass: record tape + branch hash, then pull analytic gradients.
    // Leaves may carry gradients from earlier passes; start from zero.
    for (const auto& leaf : leaves) {
        Tensor t = leaf.tensor;
        t.zero_grad();
    }
    Tape tape;
    std::uint64_t base_hash = 0;
    {
        TapeScope scope(tape);
        trace.reset();
        trace.enable(true);
        Tensor loss = fn();
        trace.enable(false);
        base_hash = trace.hash();
        if (numel(loss.shape()) != 1)
            throw ShapeError("grad_check: fn must be scalar-valued");
        report.base_value = loss.item();
        backward(tape, loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        auto g = leaf.tensor.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    Rng rng(opt.sample_seed);
    auto eval_at = [&](Tensor& t, std::int64_t i, double value, bool& same_branch) -> double {
        const double saved = t.raw_values()[static_cast<std::size_t>(i)];
        t.raw_values()[static_cast<std::size_t>(i)] = value;
        double out;
        {
            NoGradScope no_grad;
            trace.reset();
            trace.enable(true);
            out = fn().item();
            trace.enable(false);
        }
        same_branch = (trace.hash() == base_hash);
        t.raw_values()[static_cast<std::size_t>(i)] = saved;
        return out;
    };

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor t = leaves[li].tensor;
        const std::int64_t n = t.size();
        std::vector<std::int64_t> coords;
        if (opt.max_coords_per_leaf > 0 && n > opt.max_coords_per_leaf) {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
            rng.shuffle(coords.data(), coords.size());
            coords.resize(static_cast<std::size_t>(opt.max_coords_per_leaf));
        } else {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        }
        for (std::int64_t i : coords) {
            const double x = t.values()[static_cast<std::size_t>(i)];
            bool ok_p = false, ok_m = false;
            const double fp = eval_at(t, i, x + opt.h, ok_p);
            const double fm = eval_at(t, i, x - opt.h, ok_m);
            if (!ok_p || !ok_m) {
                report.excluded++;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[li][static_cast<std::size_t>(i)];
            const double denom = std::max({opt.scale_floor, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            report.compared++;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_leaf = leaves[li].name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace v2sfm
