#pragma once

// Differentiable dense-array engine: DiffArray values plus a reverse-mode
// tape of array-level operations. Ops live in ops.hpp / conv.hpp / fft.hpp /
// sample.hpp; this header holds the value type, the tape, and the scopes
// that control recording.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "v2sfm/errors.hpp"

namespace v2sfm {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> v;  // row-major values
    std::vector<double> g;  // gradient; empty until touched by backward
    bool requires_grad = false;

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Records discrete decisions (activation signs, interpolation cells, masks)
// taken during a forward pass. grad_check compares the trace hash between the
// base point and each perturbed point; a mismatch means the finite difference
// straddled a non-smooth locus and that coordinate is excluded from the
// comparison rather than reported as a gradient defect.
class BranchTrace {
public:
    static BranchTrace& current() {
        thread_local BranchTrace t;
        return t;
    }

    void reset() { hash_ = 1469598103934665603ull; }
    void enable(bool on) { enabled_ = on; }
    bool enabled() const { return enabled_; }
    std::uint64_t hash() const { return hash_; }

    inline void feed(std::uint64_t x) {
        hash_ = (hash_ ^ x) * 1099511628211ull;
    }

private:
    bool enabled_ = false;
    std::uint64_t hash_ = 1469598103934665603ull;
};

inline void trace_branch(std::uint64_t x) {
    BranchTrace& t = BranchTrace::current();
    if (t.enabled()) t.feed(x);
}

inline bool branch_tracing() { return BranchTrace::current().enabled(); }

class Tensor;

// Ordered record of executed primitive ops. Backward replays the closures in
// exact reverse execution order; fan-out gradients accumulate additively.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return ops_.size(); }

    void clear() { ops_.clear(); }

    void backward_from(const detail::NodePtr& root) {
        if (numel(root->shape) != 1)
            throw ShapeError("backward: seed must be scalar, got " +
                             shape_str(root->shape));
        root->ensure_grad();
        root->g[0] += 1.0;
        for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
    }

    static Tape*& active_slot() {
        thread_local Tape* active = nullptr;
        return active;
    }

    static Tape* active() { return active_slot(); }

private:
    std::vector<std::function<void()>> ops_;
};

// RAII scope making a tape the active recorder on this thread.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(Tape::active_slot()) {
        Tape::active_slot() = &t;
    }
    ~TapeScope() { Tape::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// RAII scope suppressing recording (finite-difference probes, evaluation).
class NoGradScope {
public:
    NoGradScope() : prev_(Tape::active_slot()) { Tape::active_slot() = nullptr; }
    ~NoGradScope() { Tape::active_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Dense 64-bit float array with shape and optional gradient tracking.
// Value-semantics handle onto a shared node; ops produce fresh nodes.
class Tensor {
public:
    Tensor() : n_(std::make_shared<detail::Node>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.n_->shape = std::move(shape);
        t.n_->v.assign(static_cast<std::size_t>(numel(t.n_->shape)), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->v.begin(), t.n_->v.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (static_cast<std::int64_t>(values.size()) != numel(shape))
            throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        Tensor t;
        t.n_->shape = std::move(shape);
        t.n_->v = std::move(values);
        return t;
    }

    static Tensor scalar(double value) { return from({1}, {value}); }

    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.n_->requires_grad = true;
        return t;
    }

    const Shape& shape() const { return n_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(n_->v.size()); }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }

    std::span<const double> values() const { return n_->v; }
    // Direct mutation is reserved for leaves (parameters, input buffers);
    // mutating an op output invalidates recorded gradients.
    std::span<double> raw_values() { return n_->v; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool on) { n_->requires_grad = on; }

    bool has_grad() const { return !n_->g.empty(); }
    std::span<const double> grad() const {
        n_->ensure_grad();
        return n_->g;
    }
    std::span<double> raw_grad() {
        n_->ensure_grad();
        return n_->g;
    }
    void zero_grad() {
        if (!n_->g.empty()) std::fill(n_->g.begin(), n_->g.end(), 0.0);
    }

    double item() const {
        if (n_->v.size() != 1)
            throw ShapeError("item: tensor is not scalar, shape " +
                             shape_str(n_->shape));
        return n_->v[0];
    }

    double at(std::int64_t i) const { return n_->v[static_cast<std::size_t>(i)]; }

    bool defined() const { return !n_->shape.empty() || !n_->v.empty(); }

    detail::NodePtr node() const { return n_; }

private:
    detail::NodePtr n_;
};

inline void backward(Tape& tape, const Tensor& loss) {
    tape.backward_from(loss.node());
}

namespace detail {

inline void check_finite(std::span<const double> v, const char* op_name) {
    for (double x : v) {
        if (!std::isfinite(x))
            throw NumericalError(std::string("non-finite value produced by ") +
                                 op_name);
    }
}

// Allocate the op result; requires_grad propagates when a tape is recording.
inline Tensor make_result(Shape shape, bool any_input_grad) {
    Tensor out = Tensor::zeros(std::move(shape));
    if (any_input_grad && Tape::active() != nullptr)
        out.set_requires_grad(true);
    return out;
}

inline bool recording(bool any_input_grad) {
    return any_input_grad && Tape::active() != nullptr;
}

}  // namespace detail

}  // namespace v2sfm
