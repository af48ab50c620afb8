#include <doctest.h>

#include "cvattn/attention.hpp"
#include "cvattn/gradcheck_suites.hpp"

using namespace cvattn;

namespace {

ClassicGateParams<double> zero_gate(Index fx, Index fg, Index fi) {
    ClassicGateParams<double> p;
    p.w_x = Tensor<double>::zeros({fi, fx, 1, 1});
    p.w_g = Tensor<double>::zeros({fi, fg, 1, 1});
    p.b_f = Tensor<double>::zeros({fi});
    p.psi = Tensor<double>::zeros({1, fi, 1, 1});
    p.b_psi = Tensor<double>::zeros({1});
    return p;
}

CvGateConfig<double> zero_cv_gate(Index fx) {
    CvGateConfig<double> c;
    c.gate = zero_gate(fx, fx, 2);
    c.dt.lambda_dt = 0.5;
    c.dt.kernel_radius = 7;
    c.w_img = Tensor<double>::zeros({1, fx, 1, 1});
    c.w_mix = Tensor<double>::zeros({1, 1, 1, 1});
    c.b_w = Tensor<double>::zeros({1});
    return c;
}

}  // namespace

TEST_CASE("additive attention with zero parameters is exactly one half") {
    Rng rng(1);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 6, 6}, rng, -2, 2);
    Tensor<double> y = Tensor<double>::uniform({2, 5, 6, 6}, rng, -2, 2);
    Tensor<double> alpha = additive_attention(x, y, zero_gate(3, 5, 4));
    CHECK(alpha.shape() == Shape{2, 1, 6, 6});
    for (Index i = 0; i < alpha.numel(); ++i) CHECK(alpha.at(i) == 0.5);
}

TEST_CASE("additive attention output is strictly inside (0,1)") {
    Rng rng(2);
    Tensor<double> x = Tensor<double>::uniform({1, 2, 8, 8}, rng, -3, 3);
    Tensor<double> y = Tensor<double>::uniform({1, 2, 8, 8}, rng, -3, 3);
    ClassicGateParams<double> p = zero_gate(2, 2, 3);
    Rng wr(3);
    p.w_x = Tensor<double>::uniform({3, 2, 1, 1}, wr, -4, 4);
    p.w_g = Tensor<double>::uniform({3, 2, 1, 1}, wr, -4, 4);
    p.psi = Tensor<double>::uniform({1, 3, 1, 1}, wr, -4, 4);
    Tensor<double> alpha = additive_attention(x, y, p);
    for (Index i = 0; i < alpha.numel(); ++i) {
        CHECK(alpha.at(i) > 0.0);
        CHECK(alpha.at(i) < 1.0);
    }
}

TEST_CASE("additive attention rejects channel mismatches") {
    Tensor<double> x = Tensor<double>::zeros({1, 3, 4, 4});
    Tensor<double> y = Tensor<double>::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(additive_attention(x, y, zero_gate(2, 2, 2)), ShapeError);
    Tensor<double> y_misaligned = Tensor<double>::zeros({1, 2, 8, 8});
    CHECK_THROWS_AS(additive_attention(x, y_misaligned, zero_gate(3, 2, 2)), ShapeError);
}

TEST_CASE("classic gate modulates the skip path") {
    Rng rng(5);
    Tensor<double> x = Tensor<double>::uniform({1, 2, 4, 4}, rng, 0.1, 1.0);
    Tensor<double> y = Tensor<double>::uniform({1, 2, 4, 4}, rng, -1, 1);

    // saturated gate (huge psi bias): gated ~ x_skip
    ClassicGateParams<double> sat = zero_gate(2, 2, 2);
    sat.b_psi = Tensor<double>::full({1}, 40.0);
    ClassicGateOutput<double> out = classic_gate(x, y, sat);
    for (Index i = 0; i < x.numel(); ++i) {
        CHECK(out.gated.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));
    }

    // zero gate: exactly half the skip
    ClassicGateOutput<double> half = classic_gate(x, y, zero_gate(2, 2, 2));
    for (Index i = 0; i < x.numel(); ++i) CHECK(half.gated.at(i) == 0.5 * x.at(i));

    // alpha in (0,1) keeps gated between 0 and x_skip for nonnegative skips
    Rng wr(6);
    ClassicGateParams<double> p = zero_gate(2, 2, 2);
    p.w_x = Tensor<double>::uniform({2, 2, 1, 1}, wr, -2, 2);
    p.psi = Tensor<double>::uniform({1, 2, 1, 1}, wr, -2, 2);
    ClassicGateOutput<double> g = classic_gate(x, y, p);
    for (Index i = 0; i < x.numel(); ++i) {
        CHECK(g.gated.at(i) > 0.0);
        CHECK(g.gated.at(i) < x.at(i));
    }
}

TEST_CASE("image conditioning with zero weights is one half") {
    Rng rng(7);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 5, 5}, rng, -1, 1);
    Tensor<double> img = Tensor<double>::uniform({2, 1, 5, 5}, rng, 0, 1);
    CvGateConfig<double> c = zero_cv_gate(3);
    Tensor<double> gamma = image_conditioning(x, img, c);
    CHECK(gamma.shape() == Shape{2, 1, 5, 5});
    for (Index i = 0; i < gamma.numel(); ++i) CHECK(gamma.at(i) == 0.5);

    // strictly inside (0,1) for wild inputs
    Rng wr(8);
    c.w_img = Tensor<double>::uniform({1, 3, 1, 1}, wr, -5, 5);
    c.w_mix = Tensor<double>::uniform({1, 1, 1, 1}, wr, -5, 5);
    Tensor<double> wild = Tensor<double>::uniform({2, 3, 5, 5}, wr, -50, 50);
    Tensor<double> g2 = image_conditioning(wild, img, c);
    for (Index i = 0; i < g2.numel(); ++i) {
        CHECK(g2.at(i) > 0.0);
        CHECK(g2.at(i) < 1.0);
    }
    CHECK_THROWS_AS(image_conditioning(x, Tensor<double>::zeros({2, 2, 5, 5}), c), ShapeError);
}

TEST_CASE("cv gate with K=1 and dt=0 reduces to a smoothed dilation") {
    Rng rng(9);
    const Index fx = 2;
    Tensor<double> x = Tensor<double>::uniform({1, fx, 8, 8}, rng, -1, 1);
    Tensor<double> y = Tensor<double>::uniform({1, fx, 8, 8}, rng, -1, 1);
    Tensor<double> img = Tensor<double>::uniform({1, 1, 8, 8}, rng, 0, 1);
    CvGateConfig<double> c = zero_cv_gate(fx);
    Rng wr(10);
    c.gate.w_x = Tensor<double>::uniform({2, fx, 1, 1}, wr, -1, 1);
    c.gate.psi = Tensor<double>::uniform({1, 2, 1, 1}, wr, -1, 1);
    c.unroll = 1;
    c.cv.dt = 0.0;
    c.tau0 = 2.0;
    CvGateOutput<double> out = cv_attention_gate(x, y, img, c);

    Tensor<double> alpha = additive_attention(x, y, c.gate);
    Tensor<double> beta = soft_distance_transform(alpha, c.dt);
    Tensor<double> expected = heaviside_eps(scalar_add(scalar_mul(beta, -1.0), 2.0),
                                            static_cast<double>(c.cv.eps));
    for (Index i = 0; i < expected.numel(); ++i) {
        CHECK(out.zeta.at(i) == doctest::Approx(expected.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("one-hot attention composes to a soft disk around the peak") {
    // Verifies the dt -> phi0 -> H_eps composition on a constructed one-hot
    // map; the additive gate cannot emit exact one-hots (sigmoid range).
    const Index n = 16;
    DtParams dtp;
    dtp.lambda_dt = 0.25;
    dtp.kernel_radius = 4;
    const double tau0 = 2.0, eps = 1.0;
    Tensor<double> alpha = Tensor<double>::zeros({n, n});
    const Index qy = 7, qx = 9;
    alpha.raw()[qy * n + qx] = 1.0;
    Tensor<double> beta = soft_distance_transform(alpha, dtp);
    Tensor<double> zeta = heaviside_eps(scalar_add(scalar_mul(beta, -1.0), tau0), eps);
    for (Index y = 0; y < n; ++y) {
        for (Index x = 0; x < n; ++x) {
            const double d = std::hypot(double(y - qy), double(x - qx));
            if (d <= static_cast<double>(dtp.kernel_radius)) {
                const double expected = 0.5 * (1 + (2 / kPi) * std::atan((tau0 - d) / eps));
                CHECK(zeta(y, x) == doctest::Approx(expected).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("gate equivalence: huge tau0 degenerates to the identity skip") {
    Rng rng(11);
    const Index fx = 3;
    Tensor<double> x = Tensor<double>::uniform({1, fx, 8, 8}, rng, -2, 2);
    Tensor<double> y = Tensor<double>::uniform({1, fx, 8, 8}, rng, -2, 2);
    Tensor<double> img = Tensor<double>::uniform({1, 1, 16, 16}, rng, 0, 1);
    CvGateConfig<double> c = zero_cv_gate(fx);
    c.unroll = 1;
    c.cv.dt = 0.0;
    c.tau0 = 1e6;
    CvGateOutput<double> out = cv_attention_gate(x, y, img, c);
    double max_abs_x = 0, max_dev = 0;
    for (Index i = 0; i < x.numel(); ++i) {
        max_abs_x = std::max(max_abs_x, std::abs(x.at(i)));
        max_dev = std::max(max_dev, std::abs(out.gated.at(i) - x.at(i)));
    }
    CHECK(max_dev / max_abs_x <= 1e-6);
    CHECK(out.zeta_saturated);  // zeta pinned at ~1 everywhere, flagged
}

TEST_CASE("gate invariants: zeta range, sign preservation, determinism") {
    Rng rng(13);
    const Index fx = 2;
    Tensor<double> x = Tensor<double>::uniform({2, fx, 8, 8}, rng, -2, 2);
    Tensor<double> y = Tensor<double>::uniform({2, fx, 8, 8}, rng, -2, 2);
    Tensor<double> img = Tensor<double>::uniform({2, 1, 16, 16}, rng, 0, 1);
    CvGateConfig<double> c = zero_cv_gate(fx);
    Rng wr(14);
    c.gate.w_x = Tensor<double>::uniform({2, fx, 1, 1}, wr, -1, 1);
    c.gate.w_g = Tensor<double>::uniform({2, fx, 1, 1}, wr, -1, 1);
    c.gate.psi = Tensor<double>::uniform({1, 2, 1, 1}, wr, -1, 1);
    c.w_img = Tensor<double>::uniform({1, fx, 1, 1}, wr, -1, 1);
    c.w_mix = Tensor<double>::uniform({1, 1, 1, 1}, wr, -1, 1);
    CvGateOutput<double> a = cv_attention_gate(x, y, img, c);
    for (Index i = 0; i < a.zeta.numel(); ++i) {
        CHECK(a.zeta.at(i) > 0.0);
        CHECK(a.zeta.at(i) < 1.0);
    }
    for (Index i = 0; i < x.numel(); ++i) {
        if (x.at(i) > 0) CHECK(a.gated.at(i) > 0);
        if (x.at(i) < 0) CHECK(a.gated.at(i) < 0);
    }
    CHECK(a.alpha.defined());
    CHECK(a.beta.defined());
    CHECK(a.gamma.defined());
    CvGateOutput<double> b = cv_attention_gate(x, y, img, c);
    CHECK(a.zeta.same_values(b.zeta));
    CHECK(a.gated.same_values(b.gated));
}

TEST_CASE("gate configuration validation") {
    CvGateConfig<double> c = zero_cv_gate(2);
    c.unroll = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CvGateConfig<double> c2 = zero_cv_gate(2);
    c2.tau0 = 0.0;
    CHECK_THROWS_AS(c2.validate(), ConfigError);
}

TEST_CASE("gate gradients match finite differences") {
    for (const auto& r : gradcheck_suite_gate()) {
        INFO(r.name);
        CHECK(r.max_rel_err <= r.threshold);
    }
}
