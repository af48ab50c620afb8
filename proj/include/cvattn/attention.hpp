#pragma once

#include "cvattn/chan_vese.hpp"
#include "cvattn/distance_transform.hpp"

namespace cvattn {

/// Additive attention gate parameters; every convolution is 1x1 and the
/// joint projection collapses to a single channel.
template <typename S>
struct ClassicGateParams {
    Tensor<S> w_x;    // [F_int, F_x, 1, 1] skip projection
    Tensor<S> w_g;    // [F_int, F_g, 1, 1] gating projection
    Tensor<S> b_f;    // [F_int] joint-branch bias
    Tensor<S> psi;    // [1, F_int, 1, 1]
    Tensor<S> b_psi;  // [1]
};

/// alpha = sigmoid(psi . relu(W_x x + W_g y + b_f) + b_psi), strictly in
/// (0,1). Inputs must already be spatially aligned.
template <typename S>
Tensor<S> additive_attention(const Tensor<S>& x_skip, const Tensor<S>& y_gate,
                             const ClassicGateParams<S>& p) {
    if (x_skip.rank() != 4 || y_gate.rank() != 4) {
        throw ShapeError("additive_attention: rank-4 feature maps required");
    }
    if (x_skip.extent(2) != y_gate.extent(2) || x_skip.extent(3) != y_gate.extent(3)) {
        throw ShapeError("additive_attention: spatial mismatch " + shape_str(x_skip.shape()) +
                         " vs " + shape_str(y_gate.shape()));
    }
    Tensor<S> joint = add(conv2d(x_skip, p.w_x, p.b_f), conv2d(y_gate, p.w_g, Tensor<S>()));
    return sigmoid(conv2d(relu(joint), p.psi, p.b_psi));
}

template <typename S>
struct ClassicGateOutput {
    Tensor<S> gated;
    Tensor<S> alpha;
};

/// Skip features modulated by the attention coefficient (broadcast over
/// channels).
template <typename S>
ClassicGateOutput<S> classic_gate(const Tensor<S>& x_skip, const Tensor<S>& y_gate,
                                  const ClassicGateParams<S>& p) {
    ClassicGateOutput<S> out;
    out.alpha = additive_attention(x_skip, y_gate, p);
    out.gated = mul(x_skip, out.alpha);
    return out;
}

/// Everything one Chan-Vese attention gate needs: the additive-attention
/// parameters, the soft distance transform, the gate-local level-set
/// parameters with K unrolled iterations, the contour offset tau0 for
/// phi0 = tau0 - beta, and the image-conditioning branch weights.
template <typename S>
struct CvGateConfig {
    ClassicGateParams<S> gate;
    DtParams dt;
    ChanVeseParams cv = gate_chan_vese_defaults();
    int unroll = 5;       // K
    double tau0 = 2.0;
    Tensor<S> w_img;      // [1, F_x, 1, 1] conditioning projection
    Tensor<S> w_mix;      // [1, 1, 1, 1]
    Tensor<S> b_w;        // [1]

    static ChanVeseParams gate_chan_vese_defaults() {
        ChanVeseParams p;
        p.mu = 0.1;
        p.nu = 1.0;
        p.dt = 0.2;  // smaller than the standalone solver, for stability under training noise
        p.iters = 1; // superseded by unroll inside the gate
        return p;
    }

    void validate() const {
        dt.validate();
        cv.validate();
        if (unroll < 1) throw ConfigError("CvGateConfig: unroll K >= 1 required");
        if (tau0 <= 0) throw ConfigError("CvGateConfig: tau0 > 0 required");
    }
};

/// gamma = sigmoid(W_mix (W_img x_skip + sigmoid(img)) + b_W), one channel.
/// img_resized must already be resampled to the gate resolution with values
/// in [0,1].
template <typename S>
Tensor<S> image_conditioning(const Tensor<S>& x_skip, const Tensor<S>& img_resized,
                             const CvGateConfig<S>& c) {
    if (img_resized.rank() != 4 || img_resized.extent(1) != 1) {
        throw ShapeError("image_conditioning: img must be [N,1,H,W], got " +
                         shape_str(img_resized.shape()));
    }
    if (img_resized.extent(2) != x_skip.extent(2) || img_resized.extent(3) != x_skip.extent(3)) {
        throw ShapeError("image_conditioning: spatial mismatch " + shape_str(x_skip.shape()) +
                         " vs " + shape_str(img_resized.shape()));
    }
    Tensor<S> mixed = add(conv2d(x_skip, c.w_img, Tensor<S>()), sigmoid(img_resized));
    return sigmoid(conv2d(mixed, c.w_mix, c.b_w));
}

template <typename S>
struct CvGateOutput {
    Tensor<S> gated;
    Tensor<S> zeta;
    // diagnostics
    Tensor<S> alpha, beta, gamma;
    bool zeta_saturated = false;    // > 99% of pixels within 1e-6 of 0 or 1
    DtDiagnostics dt_diag;
};

/// Per-sample min-max rescale to [0,1]; differentiable through the min/max
/// with argmin/argmax routing. Constant images map to zero.
template <typename S>
Tensor<S> normalize01(const Tensor<S>& x) {
    const std::vector<int> sp{1, 2, 3};
    Tensor<S> lo = reduce_min(x, sp, true);
    Tensor<S> hi = reduce_max(x, sp, true);
    return div(sub(x, lo), scalar_add(sub(hi, lo), S(1e-12)));
}

/// The Chan-Vese attention gate:
///   alpha -> beta = soft DT(alpha) -> phi0 = tau0 - beta
///   gamma = conditioned image, phi_K = K unrolled level-set steps on gamma,
///   zeta = H_eps(phi_K), gated = x_skip (.) zeta.
/// The raw input batch is resized to the gate resolution internally and
/// renormalized to [0,1] before conditioning.
template <typename S>
CvGateOutput<S> cv_attention_gate(const Tensor<S>& x_skip, const Tensor<S>& y_gate,
                                  const Tensor<S>& img, const CvGateConfig<S>& c) {
    c.validate();
    if (img.rank() != 4 || img.extent(1) != 1) {
        throw ShapeError("cv_attention_gate: img must be [N,1,H,W], got " + shape_str(img.shape()));
    }
    CvGateOutput<S> out;
    out.alpha = additive_attention(x_skip, y_gate, c.gate);
    out.beta = soft_distance_transform(out.alpha, c.dt, &out.dt_diag);
    Tensor<S> phi0 = scalar_add(scalar_mul(out.beta, S(-1)), static_cast<S>(c.tau0));
    Tensor<S> img_r = normalize01(resize_bilinear(img, x_skip.extent(2), x_skip.extent(3)));
    out.gamma = image_conditioning(x_skip, img_r, c);
    ChanVeseParams cv = c.cv;
    cv.iters = c.unroll;
    Tensor<S> phi = cv_evolve(out.gamma, phi0, cv);
    out.zeta = heaviside_eps(phi, static_cast<S>(c.cv.eps));
    out.gated = mul(x_skip, out.zeta);

    Index saturated = 0;
    for (Index i = 0; i < out.zeta.numel(); ++i) {
        const S z = out.zeta.at(i);
        if (z < S(1e-6) || z > S(1) - S(1e-6)) ++saturated;
    }
    out.zeta_saturated = saturated * 100 > out.zeta.numel() * 99;
    return out;
}

}  // namespace cvattn
