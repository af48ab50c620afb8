#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cvattn/ops.hpp"
#include "cvattn/rng.hpp"

namespace cvattn {

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

/// Max relative error between reverse-mode and central finite differences
/// for a scalar-valued f of one tensor, checked at every coordinate.
/// f64 only; finite-difference validation is meaningless at f32.
template <typename F>
double grad_check(F&& f, const Tensor<double>& x0, double h = 1e-5) {
    Tensor<double> x = x0.clone();
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> analytic;
    {
        TapeScope<double> scope(tape);
        Tensor<double> loss = f(x);
        backward(loss, tape);
        analytic = tape.grad(x);
    }
    Tensor<double> probe = x0.clone();
    probe.set_requires_grad(false);
    double worst = 0.0;
    for (Index i = 0; i < probe.numel(); ++i) {
        const double saved = probe.at(i);
        probe.raw()[i] = saved + h;
        const double fp = f(probe).value();
        probe.raw()[i] = saved - h;
        const double fm = f(probe).value();
        probe.raw()[i] = saved;
        worst = std::max(worst, rel_error(analytic.at(i), (fp - fm) / (2.0 * h)));
    }
    return worst;
}

/// Bookkeeping for probes discarded because the perturbation straddled a
/// discrete decision (relu sign, argmax routing), where central differences
/// measure an average of two subgradients rather than the derivative.
struct KinkStats {
    Index probed = 0;
    Index skipped = 0;
    double skipped_fraction() const {
        return probed == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(probed);
    }
};

/// Spot-check variant for losses of several tensors: loss_fn() must read the
/// watched tensors themselves (their requires_grad flags are switched on
/// here), and each is perturbed in place at up to max_coords seeded-random
/// coordinates. When kinks is given, probes whose two evaluations disagree
/// in activation pattern are discarded and counted instead of compared.
inline double grad_check_multi(const std::function<Tensor<double>()>& loss_fn,
                               const std::vector<Tensor<double>*>& watched, double h = 1e-5,
                               Index max_coords = -1, std::uint64_t seed = 7,
                               KinkStats* kinks = nullptr) {
    for (Tensor<double>* t : watched) t->set_requires_grad(true);
    Tape<double> tape;
    std::vector<Tensor<double>> analytic;
    {
        TapeScope<double> scope(tape);
        Tensor<double> loss = loss_fn();
        backward(loss, tape);
        for (const Tensor<double>* t : watched) analytic.push_back(tape.grad(*t));
    }
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t k = 0; k < watched.size(); ++k) {
        Tensor<double>& t = *watched[k];
        std::vector<Index> coords;
        if (max_coords < 0 || max_coords >= t.numel()) {
            coords.resize(static_cast<std::size_t>(t.numel()));
            for (Index i = 0; i < t.numel(); ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            for (Index i = 0; i < max_coords; ++i) {
                coords.push_back(rng.uniform_int(0, t.numel() - 1));
            }
        }
        for (Index c : coords) {
            const double saved = t.at(c);
            double fp, fm;
            std::uint64_t pattern_p, pattern_m;
            {
                ActivationPatternProbe probe;
                t.raw()[c] = saved + h;
                fp = loss_fn().value();
                pattern_p = probe.hash();
            }
            {
                ActivationPatternProbe probe;
                t.raw()[c] = saved - h;
                fm = loss_fn().value();
                pattern_m = probe.hash();
            }
            t.raw()[c] = saved;
            if (kinks) {
                ++kinks->probed;
                if (pattern_p != pattern_m) {
                    ++kinks->skipped;
                    continue;
                }
            }
            worst = std::max(worst, rel_error(analytic[k].at(c), (fp - fm) / (2.0 * h)));
        }
    }
    return worst;
}

}  // namespace cvattn
