#pragma once

// Vibration branch: window normalization, an LSTM sub-branch, a
// squeeze-and-excite attention sub-branch, their concatenated feature, and
// the per-level SNR heads feeding the fusion module.

#include <array>
#include <vector>

#include "v2sfm/array.hpp"
#include "v2sfm/ops.hpp"

namespace v2sfm {

inline constexpr int kVibChannels = 6;
inline constexpr int kVibSamples = 40;
inline constexpr double kVibRateHz = 40.0;
inline constexpr double kSnrFloor = 1e-3;
inline constexpr double kSnrCap = 1e6;

struct VibrationWindow {
    Tensor samples;           // [6,40], every value in [-1,1]
    double center_time = 0.0; // seconds, aligned with the snippet's first frame

    void validate() const {
        if (samples.ndim() != 2 || samples.dim(0) != kVibChannels || samples.dim(1) != kVibSamples)
            throw ValidationError("VibrationWindow: expected [6,40], got " +
                                  shape_str(samples.shape()));
        for (double v : samples.values())
            if (!(v >= -1.0 && v <= 1.0))
                throw ValidationError("VibrationWindow: sample outside [-1,1]");
    }
};

// Per-channel scaling by the dataset-level max absolute value, then clipping
// to [-1,1]. A zero max-abs (dead channel) maps to zeros.
inline VibrationWindow normalize_window(const Tensor& raw,
                                        const std::array<double, kVibChannels>& channel_max_abs,
                                        double center_time = 0.0) {
    if (raw.ndim() != 2 || raw.dim(0) != kVibChannels || raw.dim(1) != kVibSamples)
        throw ValidationError("normalize_window: expected [6,40], got " + shape_str(raw.shape()));
    for (double v : raw.values())
        if (!std::isfinite(v)) throw ValidationError("normalize_window: non-finite sample");
    VibrationWindow out;
    out.center_time = center_time;
    out.samples = Tensor::zeros({kVibChannels, kVibSamples});
    for (int c = 0; c < kVibChannels; ++c) {
        const double scale = channel_max_abs[static_cast<std::size_t>(c)];
        for (int t = 0; t < kVibSamples; ++t) {
            double v = scale > 0.0 ? raw.values()[static_cast<std::size_t>(c) * kVibSamples + t] / scale : 0.0;
            if (v > 1.0) v = 1.0;
            if (v < -1.0) v = -1.0;
            out.samples.raw_values()[static_cast<std::size_t>(c) * kVibSamples + t] = v;
        }
    }
    return out;
}

struct LstmParams {
    int hidden = 32;
    Tensor w_x;   // [4h, 6]  gate order: input, forget, cell, output
    Tensor w_h;   // [4h, h]
    Tensor bias;  // [4h]

    void validate() const {
        if (w_x.ndim() != 2 || w_x.dim(0) != 4 * hidden || w_x.dim(1) != kVibChannels)
            throw ShapeError("LstmParams: w_x shape mismatch");
        if (w_h.ndim() != 2 || w_h.dim(0) != 4 * hidden || w_h.dim(1) != hidden)
            throw ShapeError("LstmParams: w_h shape mismatch");
        if (bias.ndim() != 1 || bias.dim(0) != 4 * hidden)
            throw ShapeError("LstmParams: bias shape mismatch");
    }
};

struct LstmResult {
    Tensor final_hidden;             // [h]
    std::vector<Tensor> hidden_seq;  // one [h] per time step
};

inline LstmResult lstm_forward(const VibrationWindow& window, const LstmParams& p) {
    p.validate();
    const int h = p.hidden;
    Tensor hs = Tensor::zeros({h});
    Tensor cs = Tensor::zeros({h});
    LstmResult out;
    out.hidden_seq.reserve(kVibSamples);
    for (int t = 0; t < kVibSamples; ++t) {
        Tensor xt = col(window.samples, t);
        Tensor z = add(add(matvec(p.w_x, xt), matvec(p.w_h, hs)), p.bias);
        Tensor gi = sigmoid(slice0(z, 0, h));
        Tensor gf = sigmoid(slice0(z, h, 2 * h));
        Tensor gc = tanh_t(slice0(z, 2 * h, 3 * h));
        Tensor go = sigmoid(slice0(z, 3 * h, 4 * h));
        cs = add(mul(gf, cs), mul(gi, gc));
        hs = mul(go, tanh_t(cs));
        out.hidden_seq.push_back(hs);
    }
    out.final_hidden = hs;
    return out;
}

struct SeParams {
    Tensor w1;  // [c/r, c]
    Tensor b1;  // [c/r]
    Tensor w2;  // [c, c/r]
    Tensor b2;  // [c]
};

// Squeeze (temporal mean per channel), excite (two-layer gate), rescale.
inline Tensor se_attention(const Tensor& x, const SeParams& p) {
    if (x.ndim() != 2) throw ShapeError("se_attention: expected [C,T]");
    const int c = x.dim(0);
    if (p.w1.ndim() != 2 || p.w1.dim(1) != c || p.w2.dim(0) != c ||
        p.w2.dim(1) != p.w1.dim(0))
        throw ShapeError("se_attention: weight shapes do not match channel count");
    if (c % p.w1.dim(0) != 0)
        throw ShapeError("se_attention: reduction must divide channel count");
    Tensor squeeze = row_mean(x);
    Tensor gate = sigmoid(linear(p.w2, relu(linear(p.w1, squeeze, p.b1)), p.b2));
    return scale_rows(x, gate);
}

struct MlstmParams {
    LstmParams lstm;
    SeParams se;
    Tensor w_out;  // [d_vib, h + 6]
    Tensor b_out;  // [d_vib]
};

// LSTM final hidden state concatenated with the temporally pooled SE-gated
// signal, mapped to the vibration feature vector.
inline Tensor mlstm_forward(const VibrationWindow& window, const MlstmParams& p) {
    window.validate();
    LstmResult lstm = lstm_forward(window, p.lstm);
    Tensor gated = se_attention(window.samples, p.se);
    Tensor pooled = row_mean(gated);
    Tensor merged = concat0({lstm.final_hidden, pooled});
    if (p.w_out.dim(1) != merged.dim(0))
        throw ShapeError("mlstm_forward: output projection shape mismatch");
    return linear(p.w_out, merged, p.b_out);
}

struct SnrHeadParams {
    Tensor w;  // [1, d_vib]
    Tensor b;  // [1]
};

// ReLU affine head clamped into [kSnrFloor, kSnrCap]; one positive scalar
// per fusion level.
inline Tensor snr_head(const Tensor& vib_feature, const SnrHeadParams& p) {
    if (p.w.ndim() != 2 || p.w.dim(0) != 1 || p.w.dim(1) != vib_feature.dim(0))
        throw ShapeError("snr_head: weight shape mismatch");
    return clamp(relu(add(matvec(p.w, vib_feature), p.b)), kSnrFloor, kSnrCap);
}

}  // namespace v2sfm
