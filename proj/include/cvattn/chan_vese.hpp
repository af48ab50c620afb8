#pragma once

#include <optional>

#include "cvattn/ops.hpp"

namespace cvattn {

/// Energy coefficients and discretization constants for the two-phase
/// region-competition level-set segmentation.
struct ChanVeseParams {
    double mu = 0.1;        // contour length weight
    double nu = 1.0;        // inside-area weight (may be negative)
    double lambda1 = 1.0;   // inside data weight
    double lambda2 = 1.0;   // outside data weight
    double eps = 1.0;       // Heaviside smoothing width, pixels
    double dt = 0.5;        // evolution time step
    int iters = 200;        // evolution steps
    double eta = 1e-8;      // gradient-magnitude regularizer for curvature

    void validate() const {
        if (mu < 0) throw ConfigError("ChanVeseParams: mu >= 0 required");
        if (lambda1 <= 0 || lambda2 <= 0) throw ConfigError("ChanVeseParams: lambda1, lambda2 > 0 required");
        if (eps <= 0) throw ConfigError("ChanVeseParams: eps > 0 required");
        if (dt < 0) throw ConfigError("ChanVeseParams: dt >= 0 required");
        if (eta <= 0) throw ConfigError("ChanVeseParams: eta > 0 required");
        if (iters < 1) throw ConfigError("ChanVeseParams: iters >= 1 required");
    }
};

/// Signed field whose zero isocontour is the segmentation curve; the inside
/// region is strictly {phi > 0}. Stored as a plain tensor of shape [H,W]
/// (standalone solver) or [N,1,H,W] (batched, inside gates).
template <typename S>
using LevelSet = Tensor<S>;

/// Smoothed step: H_eps(z) = 1/2 (1 + (2/pi) atan(z/eps)). Strictly
/// increasing, value 1/2 at 0; its derivative is dirac_eps, whose global
/// support keeps gradients alive far from the contour.
template <typename S>
Tensor<S> heaviside_eps(const Tensor<S>& z, S eps) {
    if (eps <= S(0)) throw ConfigError("heaviside_eps: eps > 0 required");
    return pointwise_unary(
        z, "heaviside_eps",
        [eps](S v) { return S(0.5) * (S(1) + S(2.0 / kPi) * std::atan(v / eps)); },
        [eps](S v, S) { return S(1.0 / kPi) * eps / (eps * eps + v * v); });
}

/// Smoothed Dirac mass: (1/pi) eps / (eps^2 + z^2), positive everywhere.
template <typename S>
Tensor<S> dirac_eps(const Tensor<S>& z, S eps) {
    if (eps <= S(0)) throw ConfigError("dirac_eps: eps > 0 required");
    return pointwise_unary(
        z, "dirac_eps",
        [eps](S v) { return S(1.0 / kPi) * eps / (eps * eps + v * v); },
        [eps](S v, S) {
            const S d = eps * eps + v * v;
            return S(-2.0 / kPi) * eps * v / (d * d);
        });
}

namespace detail {

template <typename S>
Tensor<S> as_nchw(const Tensor<S>& t, const char* name) {
    if (t.rank() == 4) return t;
    if (t.rank() == 2) return reshape(t, {1, 1, t.extent(0), t.extent(1)});
    throw ShapeError(std::string(name) + ": rank-2 or rank-4 tensor required, got " +
                     shape_str(t.shape()));
}

}  // namespace detail

template <typename S>
struct RegionMeans {
    Tensor<S> c1, c2;                        // shape [N,1,1,1]
    std::vector<std::uint8_t> c1_fallback;   // per sample: degenerate region, global mean used
    std::vector<std::uint8_t> c2_fallback;
};

/// Region averages c1 (inside, weighted by H_eps(phi)) and c2 (outside).
/// A region whose soft mass falls below 1e-8 gets the global image mean and
/// is flagged.
template <typename S>
RegionMeans<S> region_means(const Tensor<S>& img_in, const Tensor<S>& phi_in, S eps) {
    Tensor<S> img = detail::as_nchw(img_in, "region_means");
    Tensor<S> phi = detail::as_nchw(phi_in, "region_means");
    if (img.shape() != phi.shape()) {
        throw ShapeError("region_means: image " + shape_str(img_in.shape()) + " vs phi " +
                         shape_str(phi_in.shape()));
    }
    const Index n_batch = img.extent(0);
    Tensor<S> h = heaviside_eps(phi, eps);
    Tensor<S> h_out = sub(Tensor<S>::scalar(S(1)), h);

    const std::vector<int> sp{2, 3};
    Tensor<S> den1 = reduce_sum(h, sp, true);
    Tensor<S> den2 = reduce_sum(h_out, sp, true);
    Tensor<S> num1 = reduce_sum(mul(img, h), sp, true);
    Tensor<S> num2 = reduce_sum(mul(img, h_out), sp, true);

    RegionMeans<S> out;
    out.c1_fallback.assign(static_cast<std::size_t>(n_batch), 0);
    out.c2_fallback.assign(static_cast<std::size_t>(n_batch), 0);
    bool any_fallback = false;
    for (Index n = 0; n < n_batch; ++n) {
        if (den1.at(n) < S(1e-8)) {
            out.c1_fallback[static_cast<std::size_t>(n)] = 1;
            any_fallback = true;
        }
        if (den2.at(n) < S(1e-8)) {
            out.c2_fallback[static_cast<std::size_t>(n)] = 1;
            any_fallback = true;
        }
        fold_decision(out.c1_fallback[static_cast<std::size_t>(n)] * 2ULL +
                      out.c2_fallback[static_cast<std::size_t>(n)]);
    }
    if (!any_fallback) {
        out.c1 = div(num1, den1);
        out.c2 = div(num2, den2);
        return out;
    }
    // Blend per sample between the region mean and the global mean through
    // constant selectors; the unused branch gets a guarded denominator so no
    // NaN can enter the graph.
    Tensor<S> gmean = reduce_mean(img, sp, true);
    auto blended = [&](const Tensor<S>& num, const Tensor<S>& den,
                       const std::vector<std::uint8_t>& fb) {
        Tensor<S> sel = Tensor<S>::zeros({n_batch, 1, 1, 1});
        Tensor<S> guard = Tensor<S>::zeros({n_batch, 1, 1, 1});
        for (Index n = 0; n < n_batch; ++n) {
            const bool ok = fb[static_cast<std::size_t>(n)] == 0;
            sel.raw()[n] = ok ? S(1) : S(0);
            guard.raw()[n] = ok ? S(0) : S(1);
        }
        Tensor<S> safe = div(num, add(den, guard));
        return add(mul(sel, safe), mul(guard, gmean));
    };
    out.c1 = blended(num1, den1, out.c1_fallback);
    out.c2 = blended(num2, den2, out.c2_fallback);
    return out;
}

/// Divergence of the normalized gradient, div(grad(phi)/|grad(phi)|), with
/// |grad(phi)| regularized as sqrt(phi_x^2 + phi_y^2 + eta^2); central
/// differences with replicated (Neumann) edges throughout.
template <typename S>
Tensor<S> curvature(const Tensor<S>& phi_in, S eta) {
    if (eta <= S(0)) throw ConfigError("curvature: eta > 0 required");
    const bool rank2 = phi_in.rank() == 2;
    Tensor<S> phi = detail::as_nchw(phi_in, "curvature");
    Tensor<S> px = ddx_central(phi);
    Tensor<S> py = ddy_central(phi);
    Tensor<S> mag = cvattn::sqrt(scalar_add(add(square(px), square(py)), eta * eta));
    Tensor<S> kappa = add(ddx_central(div(px, mag)), ddy_central(div(py, mag)));
    return rank2 ? reshape(kappa, phi_in.shape()) : kappa;
}

namespace detail {

// Shared by energy and step; all inputs already [N,1,H,W].
template <typename S>
Tensor<S> gradient_magnitude(const Tensor<S>& phi, S eta) {
    Tensor<S> px = ddx_central(phi);
    Tensor<S> py = ddy_central(phi);
    return cvattn::sqrt(scalar_add(add(square(px), square(py)), eta * eta));
}

}  // namespace detail

/// Discrete segmentation energy per batch item (unit pixel area):
///   F = mu sum delta|grad phi| + nu sum H + lambda1 sum (I-c1)^2 H
///       + lambda2 sum (I-c2)^2 (1-H)
/// Returns shape [N] for batched input, a rank-0 scalar for [H,W] input.
template <typename S>
Tensor<S> cv_energy(const Tensor<S>& img_in, const Tensor<S>& phi_in, const ChanVeseParams& p) {
    p.validate();
    const bool rank2 = img_in.rank() == 2;
    Tensor<S> img = detail::as_nchw(img_in, "cv_energy");
    Tensor<S> phi = detail::as_nchw(phi_in, "cv_energy");
    if (img.shape() != phi.shape()) {
        throw ShapeError("cv_energy: image " + shape_str(img_in.shape()) + " vs phi " +
                         shape_str(phi_in.shape()));
    }
    const S eps = static_cast<S>(p.eps);
    RegionMeans<S> rm = region_means(img, phi, eps);
    Tensor<S> h = heaviside_eps(phi, eps);
    Tensor<S> h_out = sub(Tensor<S>::scalar(S(1)), h);
    Tensor<S> delta = dirac_eps(phi, eps);
    Tensor<S> mag = detail::gradient_magnitude(phi, static_cast<S>(p.eta));
    const std::vector<int> all{1, 2, 3};
    Tensor<S> length = reduce_sum(mul(delta, mag), all);
    Tensor<S> area = reduce_sum(h, all);
    Tensor<S> d1 = reduce_sum(mul(square(sub(img, rm.c1)), h), all);
    Tensor<S> d2 = reduce_sum(mul(square(sub(img, rm.c2)), h_out), all);
    Tensor<S> f = add(add(scalar_mul(length, static_cast<S>(p.mu)), scalar_mul(area, static_cast<S>(p.nu))),
                      add(scalar_mul(d1, static_cast<S>(p.lambda1)), scalar_mul(d2, static_cast<S>(p.lambda2))));
    return rank2 ? reshape(f, Shape{}) : f;
}

/// One explicit evolution step:
///   phi' = phi + dt delta_eps(phi) [mu kappa - nu - lambda1 (I-c1)^2
///                                   + lambda2 (I-c2)^2]
/// with c1, c2 recomputed from the current phi. Differentiable w.r.t. both
/// the image and phi; a non-finite update raises NumericError naming the
/// first offending flat pixel index.
template <typename S>
Tensor<S> cv_step(const Tensor<S>& img_in, const Tensor<S>& phi_in, const ChanVeseParams& p) {
    p.validate();
    const bool rank2 = img_in.rank() == 2;
    Tensor<S> img = detail::as_nchw(img_in, "cv_step");
    Tensor<S> phi = detail::as_nchw(phi_in, "cv_step");
    if (img.shape() != phi.shape()) {
        throw ShapeError("cv_step: image " + shape_str(img_in.shape()) + " vs phi " +
                         shape_str(phi_in.shape()));
    }
    const S eps = static_cast<S>(p.eps);
    RegionMeans<S> rm = region_means(img, phi, eps);
    Tensor<S> force = scalar_add(scalar_mul(curvature(phi, static_cast<S>(p.eta)), static_cast<S>(p.mu)),
                                 static_cast<S>(-p.nu));
    force = sub(force, scalar_mul(square(sub(img, rm.c1)), static_cast<S>(p.lambda1)));
    force = add(force, scalar_mul(square(sub(img, rm.c2)), static_cast<S>(p.lambda2)));
    Tensor<S> next = add(phi, scalar_mul(mul(dirac_eps(phi, eps), force), static_cast<S>(p.dt)));
    return rank2 ? reshape(next, phi_in.shape()) : next;
}

/// Runs cv_step p.iters times. No reinitialization of phi between steps.
/// When energy_trace is given it receives p.iters + 1 entries, the energy of
/// phi_0 .. phi_iters, computed off-tape on detached values.
template <typename S>
Tensor<S> cv_evolve(const Tensor<S>& img, const Tensor<S>& phi0, const ChanVeseParams& p,
                    std::vector<double>* energy_trace = nullptr) {
    p.validate();
    auto trace_energy = [&](const Tensor<S>& phi) {
        Tensor<S> img_d = img;
        Tensor<S> phi_d = phi;
        img_d.set_requires_grad(false);
        phi_d.set_requires_grad(false);
        Tensor<S> e = cv_energy(img_d, phi_d, p);
        double total = 0;
        for (Index i = 0; i < e.numel(); ++i) total += static_cast<double>(e.at(i));
        energy_trace->push_back(total);
    };
    Tensor<S> phi = phi0;
    if (energy_trace) trace_energy(phi);
    for (int k = 0; k < p.iters; ++k) {
        phi = cv_step(img, phi, p);
        if (energy_trace) trace_energy(phi);
    }
    return phi;
}

/// Hard mask from the zero level set; strictly phi > 0 is foreground, so an
/// all-zero phi yields an all-zero mask.
template <typename S>
Tensor<S> cv_segment(const Tensor<S>& phi) {
    Tensor<S> mask = Tensor<S>::zeros(phi.shape());
    for (Index i = 0; i < phi.numel(); ++i) mask.raw()[i] = phi.at(i) > S(0) ? S(1) : S(0);
    return mask;
}

/// Signed initializer: positive inside a circle of radius r at (cy, cx).
/// The signed distance is clamped to [-1, 1]: with the arctan Heaviside the
/// Dirac weight at |phi| = d falls off as 1/d^2, so an unclamped distance
/// profile freezes the evolution far from the contour and a few hundred
/// steps cannot move it; the bounded profile keeps region competition alive
/// everywhere. The zero level set is the same circle either way.
template <typename S>
Tensor<S> circle_level_set(Index h, Index w, double cy, double cx, double r) {
    Tensor<S> phi = Tensor<S>::zeros({h, w});
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - cy;
            const double dx = static_cast<double>(x) - cx;
            const double sd = r - std::sqrt(dy * dy + dx * dx);
            phi.raw()[y * w + x] = static_cast<S>(std::min(1.0, std::max(-1.0, sd)));
        }
    }
    return phi;
}

}  // namespace cvattn
