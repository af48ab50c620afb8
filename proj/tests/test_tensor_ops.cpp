#include <doctest.h>

#include <sstream>

#include "cvattn/gradcheck.hpp"
#include "cvattn/gradcheck_suites.hpp"
#include "cvattn/ops.hpp"

using namespace cvattn;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1) {
    return Tensor<double>::uniform(std::move(s), rng, lo, hi);
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
    Tensor<float> t = Tensor<float>::zeros({2, 3, 4, 5});
    CHECK(t.numel() == 120);
    CHECK(t.rank() == 4);
    CHECK(numel_of(t.shape()) == t.numel());
    Tensor<float> s = Tensor<float>::scalar(3.5f);
    CHECK(s.rank() == 0);
    CHECK(s.numel() == 1);
    CHECK(s.value() == 3.5f);
    Tensor<float> none;
    CHECK(!none.defined());
    CHECK(none.numel() == 0);
}

TEST_CASE("conv2d identity 1x1 kernel") {
    Rng rng(3);
    Tensor<double> x = rand_t({2, 1, 5, 5}, rng);
    Tensor<double> w = Tensor<double>::ones({1, 1, 1, 1});
    Tensor<double> b = Tensor<double>::zeros({1});
    Tensor<double> y = conv2d(x, w, b);
    CHECK(y.shape() == x.shape());
    for (Index i = 0; i < x.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-15));
}

TEST_CASE("conv2d ones-kernel overlap counting") {
    Tensor<double> x = Tensor<double>::ones({1, 1, 3, 3});
    Tensor<double> w = Tensor<double>::ones({1, 1, 3, 3});
    Tensor<double> y = conv2d(x, w, Tensor<double>(), 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y(0, 0, 1, 1) == 9.0);  // center sees the full window
    CHECK(y(0, 0, 0, 0) == 4.0);  // corner sees a 2x2 overlap
    CHECK(y(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d shape errors name the offending dimensions") {
    Tensor<double> x = Tensor<double>::zeros({1, 3, 4, 4});
    Tensor<double> w = Tensor<double>::zeros({2, 4, 3, 3});
    try {
        conv2d(x, w, Tensor<double>(), 1, 1);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("3") != std::string::npos);
        CHECK(msg.find("4") != std::string::npos);
    }
    Tensor<double> weven = Tensor<double>::zeros({2, 3, 2, 2});
    CHECK_THROWS_AS(conv2d(x, weven, Tensor<double>()), ShapeError);
}

TEST_CASE("maxpool2d values and tie-break routing") {
    Tensor<double> x = Tensor<double>::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> y = maxpool2d(x);
    CHECK(y.numel() == 1);
    CHECK(y.at(0) == 4.0);

    // Constant input: output constant, gradient concentrated on the first
    // element of each window in row-major order.
    Tensor<double> c = Tensor<double>::ones({1, 1, 4, 4});
    c.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Tensor<double> loss = reduce_sum(maxpool2d(c));
        backward(loss, tape);
    }
    Tensor<double> g = tape.grad(c);
    for (Index h = 0; h < 4; ++h) {
        for (Index w = 0; w < 4; ++w) {
            const double expected = (h % 2 == 0 && w % 2 == 0) ? 1.0 : 0.0;
            CHECK(g(0, 0, h, w) == expected);
        }
    }
    Tensor<double> odd = Tensor<double>::zeros({1, 1, 3, 4});
    CHECK_THROWS_AS(maxpool2d(odd), ShapeError);
}

TEST_CASE("upsample2d nearest and bilinear basics") {
    Tensor<double> x = Tensor<double>::full({1, 1, 1, 1}, 7.0);
    Tensor<double> y = upsample2d(x, 2, ResampleMode::nearest);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (Index i = 0; i < 4; ++i) CHECK(y.at(i) == 7.0);

    Tensor<double> c = Tensor<double>::full({1, 2, 3, 3}, 1.25);
    Tensor<double> cb = upsample2d(c, 3, ResampleMode::bilinear);
    for (Index i = 0; i < cb.numel(); ++i) CHECK(cb.at(i) == doctest::Approx(1.25).epsilon(1e-14));

    CHECK_THROWS_AS(upsample2d(x, 1, ResampleMode::nearest), ConfigError);
}

TEST_CASE("nearest upsample inverts under block averaging") {
    Rng rng(11);
    Tensor<double> x = rand_t({2, 3, 4, 5}, rng);
    const Index f = 3;
    Tensor<double> up = upsample2d(x, f, ResampleMode::nearest);
    for (Index n = 0; n < 2; ++n)
        for (Index c = 0; c < 3; ++c)
            for (Index h = 0; h < 4; ++h)
                for (Index w = 0; w < 5; ++w) {
                    double acc = 0;
                    for (Index dy = 0; dy < f; ++dy)
                        for (Index dx = 0; dx < f; ++dx) acc += up(n, c, h * f + dy, w * f + dx);
                    CHECK(acc / (f * f) == doctest::Approx(x(n, c, h, w)).epsilon(1e-13));
                }
}

TEST_CASE("pointwise values") {
    Tensor<double> z = Tensor<double>::from_vector({3}, {0.0, -3.0, 3.0});
    Tensor<double> s = sigmoid(z);
    CHECK(s.at(0) == 0.5);
    Tensor<double> r = relu(z);
    CHECK(r.at(1) == 0.0);
    CHECK(r.at(2) == 3.0);

    // strict (0,1) even at extreme inputs
    Tensor<float> extreme = Tensor<float>::from_vector({2}, {500.0f, -500.0f});
    Tensor<float> se = sigmoid(extreme);
    CHECK(se.at(0) < 1.0f);
    CHECK(se.at(0) > 0.99f);
    CHECK(se.at(1) > 0.0f);
}

TEST_CASE("log guards its domain") {
    Tensor<double> bad = Tensor<double>::from_vector({2}, {1.0, -1.0});
    CHECK_THROWS_AS(cvattn::log(bad), NumericError);
}

TEST_CASE("broadcasting agrees with materialized expansion") {
    Rng rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        const int rank = static_cast<int>(rng.uniform_int(1, 4));
        Shape out;
        for (int d = 0; d < rank; ++d) out.push_back(rng.uniform_int(1, 4));
        auto squeeze = [&](const Shape& full) {
            Shape s = full;
            const int drop = static_cast<int>(rng.uniform_int(0, rank - 1));
            s.erase(s.begin(), s.begin() + drop);
            for (auto& e : s)
                if (rng.bernoulli(0.3)) e = 1;
            return s;
        };
        const Shape sa = squeeze(out), sb = squeeze(out);
        Tensor<double> a = rand_t(sa, rng), b = rand_t(sb, rng);
        Tensor<double> sum = add(a, b);
        Tensor<double> prod = mul(a, b);
        const Shape& os = sum.shape();
        const auto ost = strides_of(os);
        auto map_into = [&](const Shape& s, Index flat) {
            Index idx = 0;
            const auto st = strides_of(s);
            const int pad = static_cast<int>(os.size() - s.size());
            for (std::size_t d = 0; d < os.size(); ++d) {
                const Index coord = ost.empty() ? 0 : (flat / ost[d]) % os[d];
                if (static_cast<int>(d) >= pad) {
                    const std::size_t sd = d - pad;
                    idx += (s[sd] == 1 ? 0 : coord) * st[sd];
                }
            }
            return idx;
        };
        for (Index i = 0; i < sum.numel(); ++i) {
            CHECK(sum.at(i) == a.at(map_into(sa, i)) + b.at(map_into(sb, i)));
            CHECK(prod.at(i) == a.at(map_into(sa, i)) * b.at(map_into(sb, i)));
        }
    }
    Tensor<double> a = Tensor<double>::zeros({2, 3});
    Tensor<double> b = Tensor<double>::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("reductions") {
    CHECK(reduce_sum(Tensor<double>::ones({2, 3})).value() == 6.0);
    CHECK(reduce_mean(Tensor<double>::from_vector({4}, {1, 2, 3, 4})).value() == 2.5);

    // gradient of sum(x^2) is exactly 2x
    Rng rng(5);
    Tensor<double> x = rand_t({2, 3}, rng);
    x.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        backward(reduce_sum(square(x)), tape);
    }
    Tensor<double> g = tape.grad(x);
    for (Index i = 0; i < x.numel(); ++i) CHECK(g.at(i) == 2.0 * x.at(i));

    CHECK_THROWS_AS(reduce_sum(x, {7}), ShapeError);
}

TEST_CASE("backward basics and contract") {
    Rng rng(7);
    Tensor<double> x = rand_t({2, 2, 3, 3}, rng);
    x.set_requires_grad(true);

    Tape<double> t1;
    {
        TapeScope<double> scope(t1);
        backward(reduce_sum(x), t1);
    }
    Tensor<double> g1 = t1.grad(x);
    for (Index i = 0; i < x.numel(); ++i) CHECK(g1.at(i) == 1.0);

    Tape<double> t2;
    {
        TapeScope<double> scope(t2);
        backward(reduce_sum(mul(x, x)), t2);
    }
    Tensor<double> g2 = t2.grad(x);
    for (Index i = 0; i < x.numel(); ++i) CHECK(g2.at(i) == doctest::Approx(2 * x.at(i)));

    Tape<double> t3;
    {
        TapeScope<double> scope(t3);
        Tensor<double> y = square(x);
        CHECK_THROWS_AS(backward(y, t3), ShapeError);  // non-scalar loss
    }
}

TEST_CASE("tape replay accumulates additively") {
    Rng rng(9);
    Tensor<double> x = rand_t({3, 3}, rng);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss;
    {
        TapeScope<double> scope(tape);
        loss = reduce_sum(square(x));
    }
    backward(loss, tape);
    Tensor<double> once = tape.grad(x);
    backward(loss, tape);
    Tensor<double> twice = tape.grad(x);
    for (Index i = 0; i < x.numel(); ++i) {
        CHECK(twice.at(i) == doctest::Approx(2.0 * once.at(i)).epsilon(1e-15));
    }
}

TEST_CASE("reverse pass visits nodes in exact reverse record order") {
    Rng rng(13);
    Tensor<double> x = rand_t({2, 2}, rng);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss;
    {
        TapeScope<double> scope(tape);
        loss = reduce_sum(sigmoid(scalar_mul(relu(x), 2.0)));
    }
    std::vector<std::size_t> visits;
    tape.set_visit_trace(&visits);
    backward(loss, tape);
    REQUIRE(visits.size() == tape.node_count());
    for (std::size_t i = 0; i < visits.size(); ++i) {
        CHECK(visits[i] == tape.node_count() - 1 - i);
    }
}

TEST_CASE("grad_check on analytic cases") {
    Rng rng(21);
    Tensor<double> x = rand_t({2, 3}, rng);
    // exactly 0 in exact arithmetic; rounding of x +- h leaves ~1e-12
    CHECK(grad_check([](const Tensor<double>& t) { return reduce_sum(t); }, x) <= 1e-11);
    CHECK(grad_check([](const Tensor<double>& t) { return reduce_sum(sigmoid(t)); }, x) <= 1e-7);
    Tensor<double> away = Tensor<double>::from_vector({4}, {0.5, -0.7, 1.2, -2.0});
    CHECK(grad_check([](const Tensor<double>& t) { return reduce_sum(relu(t)); }, away) <= 1e-7);
}

TEST_CASE("primitive gradient suite stays within 1e-6") {
    for (const auto& r : gradcheck_suite_ops()) {
        INFO(r.name);
        CHECK(r.max_rel_err <= r.threshold);
    }
}

TEST_CASE("forward and gradients are deterministic within a build") {
    auto run = [] {
        Rng rng(33);
        Tensor<float> x = Tensor<float>::uniform({2, 3, 8, 8}, rng, -1, 1);
        Tensor<float> w = Tensor<float>::uniform({4, 3, 3, 3}, rng, -1, 1);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        Tape<float> tape;
        Tensor<float> y, loss;
        {
            TapeScope<float> scope(tape);
            y = sigmoid(conv2d(x, w, Tensor<float>(), 1, 1));
            loss = reduce_sum(y);
            backward(loss, tape);
        }
        return std::tuple{y, tape.grad(x), tape.grad(w)};
    };
    auto [y1, gx1, gw1] = run();
    auto [y2, gx2, gw2] = run();
    CHECK(y1.same_values(y2));
    CHECK(gx1.same_values(gx2));
    CHECK(gw1.same_values(gw2));
}

TEST_CASE("primitives reject non-finite results") {
    Tensor<double> x = Tensor<double>::full({1, 1, 2, 2}, 1e308);
    Tensor<double> w = Tensor<double>::full({1, 1, 1, 1}, 1e308);
    CHECK_THROWS_AS(conv2d(x, w, Tensor<double>()), NumericError);
}

TEST_CASE("no NaN/Inf from finite inputs across primitives") {
    Rng rng(41);
    Tensor<double> x = rand_t({2, 2, 4, 4}, rng, -50, 50);
    CHECK(sigmoid(x).all_finite());
    CHECK(relu(x).all_finite());
    CHECK(square(x).all_finite());
    CHECK(add(x, x).all_finite());
    CHECK(mul(x, x).all_finite());
    CHECK(reduce_mean(x).all_finite());
    CHECK(ddx_central(x).all_finite());
}

TEST_CASE("TNSR round-trip is bit-exact") {
    Rng rng(55);
    Tensor<float> tf = Tensor<float>::uniform({2, 3, 4}, rng, -10, 10);
    std::stringstream buf;
    write_tnsr(tf, buf);
    Tensor<float> back = read_tnsr<float>(buf);
    CHECK(back.same_values(tf));

    Tensor<double> td = Tensor<double>::uniform({5}, rng, -1, 1);
    std::stringstream buf2;
    write_tnsr(td, buf2);
    CHECK(tnsr_dtype(buf2) == 1);
    CHECK_THROWS_AS(read_tnsr<float>(buf2), IoError);  // dtype mismatch
    buf2.clear();
    buf2.seekg(0);
    Tensor<double> back2 = read_tnsr<double>(buf2);
    CHECK(back2.same_values(td));
}

TEST_CASE("concat splits gradients to the right inputs") {
    Rng rng(60);
    Tensor<double> a = rand_t({1, 2, 2, 2}, rng);
    Tensor<double> b = rand_t({1, 3, 2, 2}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        Tensor<double> y = concat(a, b, 1);
        CHECK(y.shape() == Shape{1, 5, 2, 2});
        backward(reduce_sum(scalar_mul(y, 3.0)), tape);
    }
    Tensor<double> ga = tape.grad(a), gb = tape.grad(b);
    for (Index i = 0; i < ga.numel(); ++i) CHECK(ga.at(i) == 3.0);
    for (Index i = 0; i < gb.numel(); ++i) CHECK(gb.at(i) == 3.0);
    CHECK_THROWS_AS(concat(a, Tensor<double>::zeros({1, 3, 3, 2}), 1), ShapeError);
}
