#pragma once

#include "cvattn/attention.hpp"
#include "cvattn/gradcheck.hpp"
#include "cvattn/loss.hpp"
#include "cvattn/unet.hpp"

namespace cvattn {

struct CheckResult {
    std::string name;
    double max_rel_err;
    double threshold;
    bool pass() const { return max_rel_err <= threshold; }
};

namespace detail {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

// Uniform magnitude in [0.1, 1.1] with random sign: keeps relu and other
// kinked ops away from their nondifferentiable points under h = 1e-5.
inline Tensor<double> rand_away_from_zero(Shape shape, Rng& rng) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) {
        const double m = rng.uniform(0.1, 1.1);
        t.raw()[i] = rng.bernoulli(0.5) ? m : -m;
    }
    return t;
}

// Weighted sum against fixed random coefficients; exercises non-uniform
// output gradients.
inline Tensor<double> dot_loss(const Tensor<double>& y, const Tensor<double>& r) {
    return reduce_sum(mul(y, r));
}

}  // namespace detail

inline std::vector<CheckResult> gradcheck_suite_ops(std::uint64_t seed = 11) {
    Rng rng(seed);
    std::vector<CheckResult> out;
    const double tol = 1e-6;
    auto run = [&](const std::string& name, double err) {
        out.push_back({name, err, tol});
    };

    {
        Tensor<double> x = detail::rand_tensor({1, 2, 6, 6}, rng);
        Tensor<double> w = detail::rand_tensor({3, 2, 3, 3}, rng);
        Tensor<double> b = detail::rand_tensor({3}, rng);
        Tensor<double> r = detail::rand_tensor({1, 3, 6, 6}, rng);
        run("conv2d/input", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(conv2d(t, w, b, 1, 1), r); }, x));
        run("conv2d/weight", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(conv2d(x, t, b, 1, 1), r); }, w));
        run("conv2d/bias", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(conv2d(x, w, t, 1, 1), r); }, b));
        Tensor<double> r2 = detail::rand_tensor({1, 3, 3, 3}, rng);
        run("conv2d/stride2", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(conv2d(t, w, b, 2, 1), r2); }, x));
    }
    {
        // Gaps within each pooling window stay far above h.
        Tensor<double> x = Tensor<double>::zeros({2, 2, 4, 4});
        for (Index i = 0; i < x.numel(); ++i) {
            x.raw()[i] = 0.01 * static_cast<double>((i * 29) % 64) + rng.uniform(0.0, 1e-4);
        }
        Tensor<double> r = detail::rand_tensor({2, 2, 2, 2}, rng);
        run("maxpool2d", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(maxpool2d(t), r); }, x));
    }
    {
        Tensor<double> x = detail::rand_tensor({1, 2, 3, 3}, rng);
        Tensor<double> r = detail::rand_tensor({1, 2, 6, 6}, rng);
        run("upsample_nearest", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(upsample2d(t, 2, ResampleMode::nearest), r);
            }, x));
        run("upsample_bilinear", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(upsample2d(t, 2, ResampleMode::bilinear), r);
            }, x));
        Tensor<double> r3 = detail::rand_tensor({1, 2, 5, 7}, rng);
        run("resize_bilinear", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(resize_bilinear(t, 5, 7), r3); }, x));
    }
    {
        Tensor<double> x = detail::rand_tensor({2, 3, 4, 4}, rng);
        Tensor<double> r = detail::rand_tensor({2, 3, 4, 4}, rng);
        run("sigmoid", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(sigmoid(t), r); }, x));
        run("square", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(square(t), r); }, x));
        Tensor<double> xa = detail::rand_away_from_zero({2, 3, 4, 4}, rng);
        run("relu", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(relu(t), r); }, xa));
        Tensor<double> xp = detail::rand_tensor({2, 3, 4, 4}, rng, 0.5, 2.0);
        run("log", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(cvattn::log(t), r); }, xp));
        run("sqrt", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(cvattn::sqrt(t), r); }, xp));
        run("scalar_ops", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(scalar_add(scalar_mul(t, 1.7), -0.3), r);
            }, x));
    }
    {
        Tensor<double> a = detail::rand_tensor({2, 3, 4, 4}, rng);
        Tensor<double> b = detail::rand_tensor({2, 1, 4, 4}, rng);
        Tensor<double> c = detail::rand_tensor({2, 1, 1, 1}, rng, 0.5, 1.5);
        Tensor<double> r = detail::rand_tensor({2, 3, 4, 4}, rng);
        run("add/broadcast", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(add(a, t), r); }, b));
        run("sub/broadcast", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(sub(t, b), r); }, a));
        run("mul/broadcast", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(mul(a, t), r); }, b));
        run("div/broadcast", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(div(a, t), r); }, c));
    }
    {
        Tensor<double> x = detail::rand_tensor({2, 3, 4, 4}, rng);
        Tensor<double> r1 = detail::rand_tensor({2}, rng);
        run("reduce_sum", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(reduce_sum(t, {1, 2, 3}), r1);
            }, x));
        run("reduce_mean", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(reduce_mean(t, {1, 2, 3}), r1);
            }, x));
        run("reduce_max", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(reduce_max(t, {1, 2, 3}), r1);
            }, x));
        run("reduce_min", grad_check(
            [&](const Tensor<double>& t) {
                return detail::dot_loss(reduce_min(t, {1, 2, 3}), r1);
            }, x));
    }
    {
        Tensor<double> a = detail::rand_tensor({1, 2, 4, 4}, rng);
        Tensor<double> b = detail::rand_tensor({1, 3, 4, 4}, rng);
        Tensor<double> r = detail::rand_tensor({1, 5, 4, 4}, rng);
        run("concat", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(concat(t, b, 1), r); }, a));
        Tensor<double> rr = detail::rand_tensor({1, 2, 4, 4}, rng);
        run("ddx_central", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(ddx_central(t), rr); }, a));
        run("ddy_central", grad_check(
            [&](const Tensor<double>& t) { return detail::dot_loss(ddy_central(t), rr); }, a));
    }
    return out;
}

inline std::vector<CheckResult> gradcheck_suite_cv(std::uint64_t seed = 13) {
    Rng rng(seed);
    std::vector<CheckResult> out;
    Tensor<double> img = detail::rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    Tensor<double> phi = detail::rand_tensor({1, 1, 8, 8}, rng, -2.0, 2.0);
    Tensor<double> r = detail::rand_tensor({1, 1, 8, 8}, rng);

    out.push_back({"heaviside_eps",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(heaviside_eps(t, 1.0), r);
                   }, phi),
                   1e-6});
    out.push_back({"dirac_eps",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(dirac_eps(t, 1.0), r);
                   }, phi),
                   1e-6});
    out.push_back({"curvature",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(curvature(t, 1e-2), r);
                   }, phi),
                   1e-4});
    ChanVeseParams p;
    p.mu = 0.1;
    p.nu = 0.5;
    p.eps = 1.0;
    p.dt = 0.3;
    p.eta = 1e-2;  // keeps the curvature denominator well-conditioned at 8x8
    p.iters = 1;
    out.push_back({"region_means",
                   grad_check([&](const Tensor<double>& t) {
                       RegionMeans<double> rm = region_means(t, phi, 1.0);
                       return reduce_sum(add(rm.c1, scalar_mul(rm.c2, 2.0)));
                   }, img),
                   1e-6});
    out.push_back({"cv_energy",
                   grad_check([&](const Tensor<double>& t) {
                       return reduce_sum(cv_energy(t, phi, p));
                   }, img),
                   1e-4});
    out.push_back({"cv_step/img",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(cv_step(t, phi, p), r);
                   }, img),
                   1e-4});
    out.push_back({"cv_step/phi",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(cv_step(img, t, p), r);
                   }, phi),
                   1e-4});
    ChanVeseParams p5 = p;
    p5.iters = 5;
    out.push_back({"cv_evolve5/img",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(cv_evolve(t, phi, p5), r);
                   }, img),
                   1e-4});
    out.push_back({"cv_evolve5/phi",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(cv_evolve(img, t, p5), r);
                   }, phi),
                   1e-4});
    return out;
}

inline std::vector<CheckResult> gradcheck_suite_dt(std::uint64_t seed = 17) {
    Rng rng(seed);
    std::vector<CheckResult> out;
    Tensor<double> alpha = detail::rand_tensor({1, 1, 8, 8}, rng, 0.05, 1.0);
    Tensor<double> r = detail::rand_tensor({1, 1, 8, 8}, rng);
    DtParams p;
    p.lambda_dt = 0.5;
    p.kernel_radius = 7;
    out.push_back({"soft_dt/euclidean",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(soft_distance_transform(t, p), r);
                   }, alpha),
                   1e-5});
    DtParams ps = p;
    ps.metric = DtMetric::squared_euclidean;
    ps.kernel_radius = 7;
    out.push_back({"soft_dt/squared",
                   grad_check([&](const Tensor<double>& t) {
                       return detail::dot_loss(soft_distance_transform(t, ps), r);
                   }, alpha),
                   1e-5});
    return out;
}

namespace detail {

inline ClassicGateParams<double> rand_gate(Index fx, Index fg, Index fi, Rng& rng) {
    ClassicGateParams<double> p;
    p.w_x = rand_tensor({fi, fx, 1, 1}, rng, -0.5, 0.5);
    p.w_g = rand_tensor({fi, fg, 1, 1}, rng, -0.5, 0.5);
    p.b_f = rand_tensor({fi}, rng, -0.2, 0.2);
    p.psi = rand_tensor({1, fi, 1, 1}, rng, -0.5, 0.5);
    p.b_psi = rand_tensor({1}, rng, -0.2, 0.2);
    return p;
}

}  // namespace detail

// The gate fixture deliberately creates contrast: a peaked attention map, a
// zero level set crossing (tau0 = 1), strong data weights and conditioning
// weights. At a flat operating point (tiny random weights) the image-branch
// gradients fall to ~1e-8 where the central-difference oracle is pure
// roundoff noise; the gradients themselves stay correct, but nothing would
// be measured. Seed 7 also keeps every relu preactivation away from its
// kink (min |q| = 4e-3 >> h).
inline std::vector<CheckResult> gradcheck_suite_gate(std::uint64_t seed = 7) {
    Rng rng(seed);
    std::vector<CheckResult> out;
    const Index fx = 2;
    Tensor<double> x = detail::rand_tensor({1, fx, 8, 8}, rng);
    Tensor<double> y = detail::rand_tensor({1, fx, 8, 8}, rng);
    Tensor<double> img = detail::rand_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    Tensor<double> r = detail::rand_tensor({1, 1, 8, 8}, rng);
    Tensor<double> rf = detail::rand_tensor({1, fx, 8, 8}, rng);

    CvGateConfig<double> c;
    c.gate.w_x = detail::rand_tensor({2, fx, 1, 1}, rng, -2.0, 2.0);
    c.gate.w_g = detail::rand_tensor({2, fx, 1, 1}, rng, -2.0, 2.0);
    c.gate.b_f = detail::rand_tensor({2}, rng, -0.5, 0.5);
    c.gate.psi = detail::rand_tensor({1, 2, 1, 1}, rng, -3.0, 3.0);
    c.gate.b_psi = detail::rand_tensor({1}, rng, -2.5, -1.5);
    c.dt.lambda_dt = 0.5;
    c.dt.kernel_radius = 7;
    c.unroll = 3;
    c.tau0 = 1.0;
    c.cv.mu = 0.1;
    c.cv.nu = 0.5;
    c.cv.lambda1 = 4.0;
    c.cv.lambda2 = 4.0;
    c.cv.dt = 0.4;
    c.cv.eta = 1e-2;
    c.w_img = detail::rand_tensor({1, fx, 1, 1}, rng, -3.0, 3.0);
    c.w_mix = detail::rand_tensor({1, 1, 1, 1}, rng, 3.0, 5.0);
    c.b_w = detail::rand_tensor({1}, rng, -2.5, -1.5);

    auto aa_loss = [&]() {
        return detail::dot_loss(additive_attention(x, y, c.gate), r);
    };
    out.push_back({"additive_attention",
                   grad_check_multi(aa_loss,
                                    {&x, &y, &c.gate.w_x, &c.gate.w_g, &c.gate.b_f, &c.gate.psi,
                                     &c.gate.b_psi},
                                    1e-5, -1, seed),
                   1e-4});
    Tensor<double> img8 = detail::rand_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    auto ic_loss = [&]() {
        return detail::dot_loss(image_conditioning(x, img8, c), r);
    };
    out.push_back({"image_conditioning",
                   grad_check_multi(ic_loss, {&x, &img8, &c.w_img, &c.w_mix, &c.b_w}, 1e-5, -1, seed),
                   1e-4});
    auto gate_loss = [&]() {
        CvGateOutput<double> go = cv_attention_gate(x, y, img, c);
        return add(detail::dot_loss(go.gated, rf), detail::dot_loss(go.zeta, r));
    };
    out.push_back({"cv_attention_gate",
                   grad_check_multi(gate_loss,
                                    {&x, &y, &img, &c.gate.w_x, &c.gate.w_g, &c.gate.b_f,
                                     &c.gate.psi, &c.gate.b_psi, &c.w_img, &c.w_mix, &c.b_w},
                                    1e-5, -1, seed),
                   1e-4});
    return out;
}

inline std::vector<CheckResult> gradcheck_suite_unet(std::uint64_t seed = 23) {
    Rng rng(seed);
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 4;
    cfg.gate_mode = GateMode::chanvese;
    cfg.gate.unroll = 3;
    cfg.gate.cv.eta = 1e-2;
    cfg.seed = 5;
    Model<double> model = build<double>(cfg);
    Tensor<double> batch = detail::rand_tensor({1, 1, 32, 32}, rng, 0.0, 1.0);
    Tensor<double> target = Tensor<double>::zeros({1, 1, 32, 32});
    for (Index i = 0; i < target.numel(); ++i) target.raw()[i] = rng.bernoulli(0.2) ? 1.0 : 0.0;

    // The 0.1 factor keeps finite-difference roundoff (which scales with the
    // loss magnitude) below threshold x 1e-8 so that coordinates whose true
    // gradient sits under the comparison floor are judged by noise the
    // oracle can actually resolve. Measurable coordinates are unaffected:
    // their relative error is scale-invariant.
    auto loss_fn = [&]() {
        ForwardResult<double> fwd = forward(model, batch);
        return scalar_mul(add(dice_loss(fwd.logits, target), bce_loss(fwd.logits, target)), 0.1);
    };
    std::vector<Tensor<double>*> watched;
    for (std::size_t i = 0; i < model.params.size(); ++i) watched.push_back(&model.params.mutable_at(i));
    // A freshly initialized relu network has preactivations arbitrarily close
    // to 0, so some probes inevitably straddle a kink where central
    // differences measure an average of two subgradients; those probes are
    // detected by activation-pattern comparison and discarded. The fraction
    // discarded is itself gated so the check cannot go quietly vacuous.
    KinkStats kinks;
    const double err = grad_check_multi(loss_fn, watched, 1e-5, 20, seed, &kinks);
    return {{"unet_chanvese/params", err, 1e-3},
            {"unet_chanvese/kinked_probe_fraction", kinks.skipped_fraction(), 0.25}};
}

inline std::vector<CheckResult> gradcheck_suite(const std::string& which) {
    std::vector<CheckResult> out;
    auto absorb = [&](std::vector<CheckResult> v) {
        out.insert(out.end(), v.begin(), v.end());
    };
    if (which == "ops" || which == "all") absorb(gradcheck_suite_ops());
    if (which == "cv" || which == "all") absorb(gradcheck_suite_cv());
    if (which == "dt" || which == "all") absorb(gradcheck_suite_dt());
    if (which == "gate" || which == "all") absorb(gradcheck_suite_gate());
    if (which == "unet" || which == "all") absorb(gradcheck_suite_unet());
    if (out.empty()) throw ConfigError("unknown gradcheck suite: " + which);
    return out;
}

}  // namespace cvattn
