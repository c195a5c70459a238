#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "v2sfm/array.hpp"
#include "v2sfm/conv.hpp"
#include "v2sfm/fft.hpp"
#include "v2sfm/gradcheck.hpp"
#include "v2sfm/ops.hpp"
#include "v2sfm/sample.hpp"
#include "testutil.hpp"

using namespace v2sfm;
using v2sfm::testing::random_tensor;

TEST(Elementwise, ReluDefinition) {
    Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
    Tensor y = elementwise(OpKind::Relu, x);
    EXPECT_EQ(y.at(0), 0.0);
    EXPECT_EQ(y.at(1), 0.0);
    EXPECT_EQ(y.at(2), 2.0);
}

TEST(Elementwise, AddZeroIdentity) {
    Rng rng(7);
    Tensor x = random_tensor({4, 5}, rng);
    Tensor y = add(x, Tensor::zeros({4, 5}));
    for (std::int64_t i = 0; i < x.size(); ++i)
        EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Elementwise, SumOfSquaresGradient) {
    Tensor x = Tensor::param({1}, {3.0});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sum(square(x));
        backward(tape, loss);
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Elementwise, BroadcastTrailing) {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({3}, {10, 20, 30});
    Tensor c = add(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.at(0), 11.0);
    EXPECT_EQ(c.at(5), 36.0);
    EXPECT_THROW(add(a, Tensor::zeros({2})), ShapeError);
}

TEST(Elementwise, BroadcastGradientReduces) {
    Tensor a = Tensor::param({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::param({2}, {10, 20});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = sum(mul(a, b));
        backward(tape, loss);
    }
    EXPECT_DOUBLE_EQ(b.grad()[0], 1.0 + 3.0);
    EXPECT_DOUBLE_EQ(b.grad()[1], 2.0 + 4.0);
    EXPECT_DOUBLE_EQ(a.grad()[0], 10.0);
    EXPECT_DOUBLE_EQ(a.grad()[3], 20.0);
}

TEST(Elementwise, DivGuard) {
    Tensor a = Tensor::from({2}, {1.0, 1.0});
    Tensor b = Tensor::from({2}, {0.5, 1e-13});
    EXPECT_THROW(divide(a, b), NumericalError);
}

TEST(Elementwise, NonFiniteDetected) {
    Tensor a = Tensor::from({1}, {800.0});
    EXPECT_THROW(exp_t(a), NumericalError);
}

TEST(Conv2d, IdentityKernel) {
    Rng rng(3);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor k = Tensor::zeros({2, 2, 1, 1});
    k.raw_values()[0] = 1.0;  // out0 <- in0
    k.raw_values()[3] = 1.0;  // out1 <- in1
    Tensor y = conv2d(x, k, 1, Pad::Same);
    EXPECT_EQ(y.shape(), x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i)
        EXPECT_DOUBLE_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv2d, OnesKernelOnConstant) {
    const double c = 0.37;
    Tensor x = Tensor::full({1, 8, 8}, c);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, k, 1, Pad::Same);
    // interior pixels see the full 3x3 support
    for (int i = 1; i < 7; ++i)
        for (int j = 1; j < 7; ++j)
            EXPECT_NEAR(y.values()[static_cast<std::size_t>(i) * 8 + j], 9.0 * c, 1e-12);
    // corner sees only 4 taps under zero padding
    EXPECT_NEAR(y.values()[0], 4.0 * c, 1e-12);
}

TEST(Conv2d, StrideAndShapes) {
    Tensor x = Tensor::zeros({3, 9, 9});
    Tensor k = Tensor::zeros({5, 3, 3, 3});
    EXPECT_EQ(conv2d(x, k, 2, Pad::Same).shape(), (Shape{5, 5, 5}));
    EXPECT_EQ(conv2d(x, k, 1, Pad::Valid).shape(), (Shape{5, 7, 7}));
    EXPECT_THROW(conv2d(x, Tensor::zeros({5, 3, 11, 11}), 1, Pad::Valid), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor::zeros({5, 2, 3, 3}), 1, Pad::Same), ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    Rng rng(11);
    Tensor x = random_tensor({1, 5, 5}, rng, -1.0, 1.0, true);
    Tensor k = random_tensor({2, 1, 3, 3}, rng, -1.0, 1.0, true);
    auto fn = [&] { return sum(square(conv2d(x, k, 1, Pad::Same))); };
    auto report = grad_check(fn, {{"x", x}, {"k", k}}, {.h = 1e-5});
    EXPECT_LT(report.max_rel_error, 1e-4) << "worst leaf " << report.worst_leaf;
    EXPECT_EQ(report.excluded, 0);
}

TEST(Conv2d, StridedGradient) {
    Rng rng(12);
    Tensor x = random_tensor({2, 8, 8}, rng, -1.0, 1.0, true);
    Tensor k = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5, true);
    auto fn = [&] { return sum(square(conv2d(x, k, 2, Pad::Same))); };
    auto report = grad_check(fn, {{"x", x}, {"k", k}}, {.h = 1e-5});
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Fft, ConstantFieldDcBin) {
    const double c = 1.25;
    Tensor x = Tensor::full({1, 4, 4}, c);
    SpectrumField s = fft2(x);
    EXPECT_NEAR(s.re.values()[0], 16.0 * c, 1e-12);
    EXPECT_NEAR(s.im.values()[0], 0.0, 1e-12);
    for (std::int64_t i = 1; i < 16; ++i) {
        EXPECT_NEAR(s.re.values()[static_cast<std::size_t>(i)], 0.0, 1e-12);
        EXPECT_NEAR(s.im.values()[static_cast<std::size_t>(i)], 0.0, 1e-12);
    }
}

TEST(Fft, Linearity) {
    Rng rng(21);
    Tensor x = random_tensor({1, 8, 8}, rng);
    Tensor y = random_tensor({1, 8, 8}, rng);
    const double a = 1.7, b = -0.6;
    SpectrumField lhs = fft2(add(mul_scalar(x, a), mul_scalar(y, b)));
    SpectrumField sx = fft2(x);
    SpectrumField sy = fft2(y);
    for (std::int64_t i = 0; i < lhs.re.size(); ++i) {
        EXPECT_NEAR(lhs.re.values()[static_cast<std::size_t>(i)],
                    a * sx.re.values()[static_cast<std::size_t>(i)] +
                        b * sy.re.values()[static_cast<std::size_t>(i)], 1e-9);
        EXPECT_NEAR(lhs.im.values()[static_cast<std::size_t>(i)],
                    a * sx.im.values()[static_cast<std::size_t>(i)] +
                        b * sy.im.values()[static_cast<std::size_t>(i)], 1e-9);
    }
}

TEST(Fft, RoundTripAndParseval) {
    Rng rng(22);
    Tensor x = random_tensor({3, 16, 32}, rng);
    SpectrumField s = fft2(x);
    Tensor back = ifft2(s);
    EXPECT_LT(v2sfm::testing::max_abs_diff(x, back), 1e-9);

    double spatial = 0.0;
    for (double v : x.values()) spatial += v * v;
    double spectral = 0.0;
    for (std::int64_t i = 0; i < s.re.size(); ++i) {
        const double re = s.re.values()[static_cast<std::size_t>(i)];
        const double im = s.im.values()[static_cast<std::size_t>(i)];
        spectral += re * re + im * im;
    }
    spectral /= 16.0 * 32.0;
    EXPECT_NEAR(spectral / spatial, 1.0, 1e-8);
}

TEST(Fft, RejectsNonPowerOfTwo) {
    EXPECT_THROW(fft2(Tensor::zeros({1, 6, 8})), ShapeError);
    EXPECT_THROW(fft2(Tensor::zeros({1, 8, 12})), ShapeError);
}

TEST(Fft, GradientThroughComplexScaling) {
    Rng rng(23);
    Tensor x = random_tensor({1, 8, 8}, rng, -1.0, 1.0, true);
    // g scales the spectrum by a fixed conjugate-symmetric complex field
    // (here: multiply by (1 + 0.3*cos pattern) real gain, which keeps the
    // inverse transform real).
    Tensor gain = Tensor::zeros({1, 8, 8});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            gain.raw_values()[static_cast<std::size_t>(i) * 8 + j] =
                1.0 + 0.3 * std::cos(2.0 * M_PI * i / 8.0) * std::cos(2.0 * M_PI * j / 8.0);
    auto fn = [&] {
        SpectrumField s = fft2(x);
        Tensor re = mul(s.re, gain);
        Tensor im = mul(s.im, gain);
        return sum(square(ifft2({re, im})));
    };
    auto report = grad_check(fn, {{"x", x}}, {.h = 1e-5});
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Bilinear, IntegerCoordsExact) {
    Rng rng(31);
    Tensor field = random_tensor({2, 5, 7}, rng);
    Tensor coords = Tensor::zeros({2, 5, 7});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 7; ++j) {
            coords.raw_values()[static_cast<std::size_t>(i) * 7 + j] = j;
            coords.raw_values()[35 + static_cast<std::size_t>(i) * 7 + j] = i;
        }
    SampleResult r = bilinear_sample(field, coords);
    for (std::int64_t i = 0; i < field.size(); ++i)
        EXPECT_EQ(r.values.values()[static_cast<std::size_t>(i)], field.values()[static_cast<std::size_t>(i)]);
    for (double m : r.mask.values()) EXPECT_EQ(m, 1.0);
}

TEST(Bilinear, OutOfBoundsZeroAndMasked) {
    Tensor field = Tensor::full({1, 4, 4}, 3.0);
    Tensor coords = Tensor::from({2, 1, 1}, {-10.0, -10.0});
    SampleResult r = bilinear_sample(field, coords);
    EXPECT_EQ(r.values.values()[0], 0.0);
    EXPECT_EQ(r.mask.values()[0], 0.0);
}

TEST(Bilinear, MidpointAverage) {
    Tensor field = Tensor::from({1, 1, 2}, {1.0, 3.0});
    Tensor coords = Tensor::from({2, 1, 1}, {0.5, 0.0});
    SampleResult r = bilinear_sample(field, coords);
    EXPECT_DOUBLE_EQ(r.values.values()[0], 2.0);
}

TEST(Bilinear, GradientMatchesFiniteDifferences) {
    Rng rng(32);
    Tensor field = random_tensor({2, 6, 6}, rng, 0.0, 1.0, true);
    Tensor coords = Tensor::zeros({2, 4, 4});
    for (int i = 0; i < 16; ++i) {
        coords.raw_values()[static_cast<std::size_t>(i)] = rng.uniform(0.3, 4.4);
        coords.raw_values()[static_cast<std::size_t>(16 + i)] = rng.uniform(0.3, 4.4);
    }
    coords.set_requires_grad(true);
    auto fn = [&] { return sum(square(bilinear_sample(field, coords).values)); };
    auto report = grad_check(fn, {{"field", field}, {"coords", coords}}, {.h = 1e-6});
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Backward, SumGivesOnes) {
    Rng rng(41);
    Tensor x = random_tensor({3, 4}, rng, -1.0, 1.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, sum(x));
    }
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, BilinearFormGradient) {
    Rng rng(42);
    Tensor x = random_tensor({5}, rng, -1.0, 1.0, true);
    Tensor y = random_tensor({5}, rng, -1.0, 1.0, false);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(tape, sum(mul(x, y)));
    }
    for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[static_cast<std::size_t>(i)], y.at(i));
}

TEST(Backward, NonScalarSeedRejected) {
    Tensor x = Tensor::param({2}, {1.0, 2.0});
    Tape tape;
    TapeScope scope(tape);
    Tensor y = square(x);
    EXPECT_THROW(backward(tape, y), ShapeError);
}

TEST(Backward, CompositeChainMatchesFiniteDifferences) {
    // conv2d -> fft2 -> spectral gain -> ifft2 -> bilinear_sample -> loss
    Rng rng(43);
    Tensor x = random_tensor({1, 8, 8}, rng, 0.0, 1.0, true);
    Tensor k = random_tensor({1, 1, 3, 3}, rng, -0.4, 0.4, true);
    Tensor coords = Tensor::zeros({2, 6, 6});
    for (int i = 0; i < 36; ++i) {
        coords.raw_values()[static_cast<std::size_t>(i)] = rng.uniform(0.4, 6.3);
        coords.raw_values()[static_cast<std::size_t>(36 + i)] = rng.uniform(0.4, 6.3);
    }
    auto fn = [&] {
        Tensor f = conv2d(x, k, 1, Pad::Same);
        SpectrumField s = fft2(f);
        Tensor den = add_scalar(add(square(s.re), square(s.im)), 4.0);
        Tensor re = divide(mul_scalar(s.re, 3.0), den);
        Tensor im = divide(mul_scalar(s.im, 3.0), den);
        Tensor back = ifft2({re, im}, 1e-6);
        return sum(square(bilinear_sample(back, coords).values));
    };
    auto report = grad_check(fn, {{"x", x}, {"k", k}}, {.h = 1e-5});
    EXPECT_LT(report.max_rel_error, 1e-4) << "worst " << report.worst_leaf;
}

TEST(Backward, BitwiseDeterministic) {
    Rng rng(44);
    Tensor x0 = random_tensor({2, 8, 8}, rng, -1.0, 1.0);
    Tensor k0 = random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
    auto run = [&](std::vector<double>& gx, std::vector<double>& gk) {
        Tensor x = Tensor::from(x0.shape(), {x0.values().begin(), x0.values().end()});
        Tensor k = Tensor::from(k0.shape(), {k0.values().begin(), k0.values().end()});
        x.set_requires_grad(true);
        k.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        backward(tape, sum(square(relu(conv2d(x, k, 1, Pad::Same)))));
        gx.assign(x.grad().begin(), x.grad().end());
        gk.assign(k.grad().begin(), k.grad().end());
    };
    std::vector<double> gx1, gk1, gx2, gk2;
    run(gx1, gk1);
    run(gx2, gk2);
    EXPECT_EQ(gx1, gx2);
    EXPECT_EQ(gk1, gk2);
}

TEST(GradCheck, PolynomialTight) {
    Tensor x = Tensor::param({2}, {1.0, 2.0});
    auto fn = [&] { return sum(square(x)); };
    auto report = grad_check(fn, {{"x", x}}, {.h = 1e-5});
    EXPECT_LT(report.max_rel_error, 1e-8);
    EXPECT_EQ(report.excluded, 0);
}

TEST(GradCheck, ReluKinkExcluded) {
    // One coordinate sits exactly on the kink; the half-step probes land on
    // different branches and the coordinate must be excluded, not compared.
    Tensor x = Tensor::param({3}, {-0.5, 0.0, 0.7});
    auto fn = [&] { return sum(relu(x)); };
    auto report = grad_check(fn, {{"x", x}}, {.h = 1e-5});
    EXPECT_EQ(report.excluded, 1);
    EXPECT_EQ(report.compared, 2);
    EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(GradCheck, RejectsBadStep) {
    Tensor x = Tensor::param({1}, {1.0});
    auto fn = [&] { return sum(x); };
    EXPECT_THROW(grad_check(fn, {{"x", x}}, {.h = 1e-2}), ValidationError);
}

// Every registered elementwise primitive against finite differences at
// random points away from non-smooth loci.
TEST(GradCheck, RegisteredPrimitivesSweep) {
    Rng rng(55);
    struct Case {
        OpKind kind;
        double lo, hi;
        bool binary;
    };
    const Case cases[] = {
        {OpKind::Add, -2.0, 2.0, true},   {OpKind::Sub, -2.0, 2.0, true},
        {OpKind::Mul, -2.0, 2.0, true},   {OpKind::Div, 0.5, 2.0, true},
        {OpKind::Exp, -1.0, 1.0, false},  {OpKind::Log, 0.2, 3.0, false},
        {OpKind::Abs, 0.1, 2.0, false},   {OpKind::Relu, 0.1, 2.0, false},
        {OpKind::Sigmoid, -2.0, 2.0, false}, {OpKind::Tanh, -2.0, 2.0, false},
        {OpKind::Pow2, -2.0, 2.0, false}, {OpKind::Sqrt, 0.2, 3.0, false},
    };
    for (const Case& c : cases) {
        Tensor a = random_tensor({10, 10}, rng, c.lo, c.hi, true);
        if (c.binary) {
            Tensor b = random_tensor({10, 10}, rng, c.lo, c.hi, false);
            auto fn = [&] { return sum(square(elementwise(c.kind, a, b))); };
            auto report = grad_check(fn, {{"a", a}}, {.h = 1e-5});
            EXPECT_LT(report.max_rel_error, 1e-4) << static_cast<int>(c.kind);
        } else {
            auto fn = [&] { return sum(square(elementwise(c.kind, a))); };
            auto report = grad_check(fn, {{"a", a}}, {.h = 1e-5});
            EXPECT_LT(report.max_rel_error, 1e-4) << static_cast<int>(c.kind);
        }
    }
}

TEST(Ops, StructuralGradients) {
    Rng rng(66);
    Tensor a = random_tensor({3, 10}, rng, -1.0, 1.0, true);
    auto fn1 = [&] { return sum(square(row_mean(a))); };
    EXPECT_LT(grad_check(fn1, {{"a", a}}).max_rel_error, 1e-4);

    Tensor s = random_tensor({3}, rng, 0.5, 1.5, true);
    auto fn2 = [&] { return sum(square(scale_rows(a, s))); };
    EXPECT_LT(grad_check(fn2, {{"a", a}, {"s", s}}).max_rel_error, 1e-4);

    Tensor x3 = random_tensor({2, 4, 4}, rng, -1.0, 1.0, true);
    Tensor b3 = random_tensor({2}, rng, -0.5, 0.5, true);
    auto fn3 = [&] { return sum(square(add_channel_bias(x3, b3))); };
    EXPECT_LT(grad_check(fn3, {{"x", x3}, {"b", b3}}).max_rel_error, 1e-4);

    auto fn4 = [&] { return sum(square(upsample2x(x3))); };
    EXPECT_LT(grad_check(fn4, {{"x", x3}}).max_rel_error, 1e-4);

    Tensor img = random_tensor({1, 9, 9}, rng, 0.0, 1.0, true);
    auto fn5 = [&] { return sum(square(box_filter(img, 7))); };
    EXPECT_LT(grad_check(fn5, {{"img", img}}).max_rel_error, 1e-4);

    auto fn6 = [&] { return sum(square(add(fdiff_x(img), fdiff_y(img)))); };
    EXPECT_LT(grad_check(fn6, {{"img", img}}).max_rel_error, 1e-4);

    Tensor w = random_tensor({4, 6}, rng, -1.0, 1.0, true);
    Tensor v = random_tensor({6}, rng, -1.0, 1.0, true);
    auto fn7 = [&] { return sum(square(matvec(w, v))); };
    EXPECT_LT(grad_check(fn7, {{"w", w}, {"v", v}}).max_rel_error, 1e-4);

    Tensor p = random_tensor({6}, rng, -2.0, 2.0, true);
    auto fn8 = [&] {
        Tensor c = concat0({slice0(p, 0, 2), slice0(p, 3, 6)});
        return sum(square(c));
    };
    EXPECT_LT(grad_check(fn8, {{"p", p}}).max_rel_error, 1e-4);
}
