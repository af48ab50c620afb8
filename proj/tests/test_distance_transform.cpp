#include <doctest.h>

#include "cvattn/distance_transform.hpp"
#include "cvattn/gradcheck_suites.hpp"
#include "cvattn/rng.hpp"

using namespace cvattn;

namespace {

Index guard_radius(double lambda) {
    return std::max<Index>(1, static_cast<Index>(std::ceil(-lambda * std::log(1e-6))) + 1);
}

Tensor<double> random_mask(Index n, Rng& rng, double density) {
    Tensor<double> m = Tensor<double>::zeros({n, n});
    bool any = false;
    for (Index i = 0; i < m.numel(); ++i) {
        if (rng.bernoulli(density)) {
            m.raw()[i] = 1.0;
            any = true;
        }
    }
    if (!any) m.raw()[rng.uniform_int(0, m.numel() - 1)] = 1.0;
    return m;
}

}  // namespace

TEST_CASE("dt_kernel entries") {
    DtParams p;
    p.lambda_dt = 1.0;
    p.kernel_radius = guard_radius(1.0);
    Tensor<double> k = dt_kernel<double>(p);
    const Index r = p.kernel_radius;
    const Index side = 2 * r + 1;
    CHECK(k.shape() == Shape{side, side});
    CHECK(k(r, r) == 1.0);
    // 3-4-5 triangle
    CHECK(k(r + 3, r + 4) == doctest::Approx(std::exp(-5.0)).epsilon(1e-12));
}

TEST_CASE("squared-euclidean kernel is exactly the outer product of 1-d kernels") {
    DtParams p;
    p.lambda_dt = 2.0;
    p.kernel_radius = 5;
    p.metric = DtMetric::squared_euclidean;
    p.allow_truncation = true;
    Tensor<double> k = dt_kernel<double>(p);
    const Index r = p.kernel_radius;
    std::vector<double> one_d(static_cast<std::size_t>(2 * r + 1));
    for (Index d = -r; d <= r; ++d) {
        one_d[static_cast<std::size_t>(d + r)] = std::exp(-static_cast<double>(d * d) / p.lambda_dt);
    }
    double max_dev = 0;
    for (Index dy = 0; dy < 2 * r + 1; ++dy)
        for (Index dx = 0; dx < 2 * r + 1; ++dx)
            max_dev = std::max(max_dev, std::abs(k(dy, dx) - one_d[dy] * one_d[dx]));
    CHECK(max_dev == 0.0);
}

TEST_CASE("truncation guard") {
    DtParams p;
    p.lambda_dt = 0.5;
    p.kernel_radius = 3;  // exp(-6) ~ 2.5e-3 >= 1e-6
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p.allow_truncation = true;
    CHECK_NOTHROW(p.validate());
    DtParams q;
    q.lambda_dt = 0.0;
    CHECK_THROWS_AS(q.validate(), ConfigError);
}

TEST_CASE("single source reproduces the exact truncated distance") {
    const Index n = 32;
    DtParams p;
    p.lambda_dt = 1.0;
    p.kernel_radius = guard_radius(1.0);
    Tensor<double> alpha = Tensor<double>::zeros({n, n});
    const Index qy = 13, qx = 19;
    alpha.raw()[qy * n + qx] = 1.0;
    Tensor<double> beta = soft_distance_transform(alpha, p);
    CHECK(beta.shape() == alpha.shape());
    CHECK(std::abs(beta(qy, qx)) <= 1e-12);
    for (Index y = 0; y < n; ++y) {
        for (Index x = 0; x < n; ++x) {
            const double d = std::hypot(static_cast<double>(y - qy), static_cast<double>(x - qx));
            if (d <= static_cast<double>(p.kernel_radius)) {
                CHECK(beta(y, x) == doctest::Approx(d).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("uniform alpha gives a constant interior") {
    const Index n = 40;
    DtParams p;
    p.lambda_dt = 0.5;
    p.kernel_radius = guard_radius(0.5);
    Tensor<double> alpha = Tensor<double>::ones({n, n});
    Tensor<double> beta = soft_distance_transform(alpha, p);
    Tensor<double> kernel = dt_kernel<double>(p);
    const double expected = -p.lambda_dt * std::log(reduce_sum(kernel).value() + 1e-20);
    CHECK(expected <= 0.0);
    const Index r = p.kernel_radius;
    for (Index y = r; y < n - r; ++y) {
        for (Index x = r; x < n - r; ++x) {
            CHECK(beta(y, x) == doctest::Approx(expected).epsilon(1e-9));
        }
    }
}

TEST_CASE("beta is antitone in alpha") {
    Rng rng(23);
    DtParams p;
    p.lambda_dt = 0.5;
    p.kernel_radius = guard_radius(0.5);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor<double> a = Tensor<double>::uniform({16, 16}, rng, 0.05, 0.6);
        Tensor<double> bump = Tensor<double>::uniform({16, 16}, rng, 0.0, 0.4);
        Tensor<double> a2 = add(a, bump);  // a2 >= a everywhere
        Tensor<double> b1 = soft_distance_transform(a, p);
        Tensor<double> b2 = soft_distance_transform(a2, p);
        for (Index i = 0; i < b1.numel(); ++i) CHECK(b2.at(i) <= b1.at(i) + 1e-12);
    }
}

TEST_CASE("exact_edt oracle basics") {
    const Index n = 16;
    Tensor<double> m = Tensor<double>::zeros({n, n});
    m.raw()[5 * n + 7] = 1.0;
    Tensor<double> d = exact_edt(m);
    for (Index y = 0; y < n; ++y)
        for (Index x = 0; x < n; ++x)
            CHECK(d(y, x) == doctest::Approx(std::hypot(double(y - 5), double(x - 7))).epsilon(1e-12));

    Tensor<double> ones = Tensor<double>::ones({n, n});
    Tensor<double> dz = exact_edt(ones);
    for (Index i = 0; i < dz.numel(); ++i) CHECK(dz.at(i) == 0.0);

    // two sources: pointwise min of the single-source fields
    Tensor<double> two = Tensor<double>::zeros({n, n});
    two.raw()[2 * n + 2] = 1.0;
    two.raw()[11 * n + 13] = 1.0;
    Tensor<double> m1 = Tensor<double>::zeros({n, n});
    m1.raw()[2 * n + 2] = 1.0;
    Tensor<double> m2 = Tensor<double>::zeros({n, n});
    m2.raw()[11 * n + 13] = 1.0;
    Tensor<double> dt2 = exact_edt(two);
    Tensor<double> d1 = exact_edt(m1), d2 = exact_edt(m2);
    for (Index i = 0; i < dt2.numel(); ++i) {
        CHECK(dt2.at(i) == doctest::Approx(std::min(d1.at(i), d2.at(i))).epsilon(1e-12));
    }

    CHECK_THROWS_AS(exact_edt(Tensor<double>::zeros({4, 4})), Error);
}

TEST_CASE("soft-min sandwich against the exact transform") {
    // exact_edt - lambda log(n_R) <= beta <= exact_edt at pixels whose
    // nearest source is within the kernel radius; max in-radius error is
    // non-increasing as lambda decreases.
    const Index n = 32;
    const double lambdas[3] = {1.0, 0.5, 0.25};
    for (int mask_i = 0; mask_i < 50; ++mask_i) {
        Rng rng(derive_seed(311, mask_i, 0xE07));
        Tensor<double> mask = random_mask(n, rng, 0.06);
        Tensor<double> edt = exact_edt(mask);
        double prev_err = std::numeric_limits<double>::infinity();
        const Index r_min = guard_radius(0.25);
        for (double lambda : lambdas) {
            DtParams p;
            p.lambda_dt = lambda;
            p.kernel_radius = guard_radius(lambda);
            Tensor<double> beta = soft_distance_transform(mask, p);
            double max_err = 0;
            for (Index y = 0; y < n; ++y) {
                for (Index x = 0; x < n; ++x) {
                    const Index i = y * n + x;
                    if (edt.at(i) > static_cast<double>(p.kernel_radius)) continue;
                    // sources inside the kernel support (the (2R+1)^2
                    // square); corner offsets up to R*sqrt(2) contribute
                    // mass, so the count must match the truncation shape
                    Index n_r = 0;
                    for (Index sy = 0; sy < n; ++sy)
                        for (Index sx = 0; sx < n; ++sx)
                            if (mask.at(sy * n + sx) != 0.0 &&
                                std::abs(sy - y) <= p.kernel_radius &&
                                std::abs(sx - x) <= p.kernel_radius)
                                ++n_r;
                    const double lo = edt.at(i) - lambda * std::log(static_cast<double>(n_r));
                    CHECK(beta.at(i) <= edt.at(i) + 1e-9);
                    CHECK(beta.at(i) >= lo - 1e-9);
                    if (edt.at(i) <= static_cast<double>(r_min)) {
                        max_err = std::max(max_err, std::abs(beta.at(i) - edt.at(i)));
                    }
                }
            }
            CHECK(max_err <= prev_err + 1e-12);
            prev_err = max_err;
        }
    }
}

TEST_CASE("translation equivariance away from the padding influence") {
    Rng rng(29);
    const Index n = 24, dy = 3, dx = 5;
    DtParams p;
    p.lambda_dt = 0.5;
    p.kernel_radius = guard_radius(0.5);
    Tensor<double> a = Tensor<double>::uniform({n, n}, rng, 0.05, 1.0);
    Tensor<double> shifted = Tensor<double>::zeros({n, n});
    for (Index y = 0; y + dy < n; ++y)
        for (Index x = 0; x + dx < n; ++x) shifted.raw()[(y + dy) * n + (x + dx)] = a.at(y * n + x);
    Tensor<double> b = soft_distance_transform(a, p);
    Tensor<double> bs = soft_distance_transform(shifted, p);
    const Index r = p.kernel_radius;
    for (Index y = r; y + dy < n - r; ++y) {
        for (Index x = r; x + dx < n - r; ++x) {
            CHECK(bs((y + dy), (x + dx)) == doctest::Approx(b(y, x)).epsilon(1e-11));
        }
    }
}

TEST_CASE("floor diagnostics flag pixels with unreachable mass") {
    DtParams p;
    p.lambda_dt = 0.25;
    p.kernel_radius = guard_radius(0.25);
    Tensor<double> alpha = Tensor<double>::zeros({24, 24});
    alpha.raw()[0] = 1.0;  // single far corner source
    DtDiagnostics diag;
    Tensor<double> beta = soft_distance_transform(alpha, p, &diag);
    CHECK(diag.floored_pixels > 0);
    CHECK(beta.all_finite());
}

TEST_CASE("distance transform gradients match finite differences") {
    for (const auto& r : gradcheck_suite_dt()) {
        INFO(r.name);
        CHECK(r.max_rel_err <= r.threshold);
    }
}
