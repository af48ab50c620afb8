#pragma once

#include "cvattn/ops.hpp"

namespace cvattn {

/// Soft Dice loss over the whole batch with smoothing 1:
///   1 - (2 sum p.t + 1) / (sum p + sum t + 1),  p = sigmoid(logits).
/// The smoothing term makes empty targets well-behaved.
template <typename S>
Tensor<S> dice_loss(const Tensor<S>& logits, const Tensor<S>& target) {
    if (logits.shape() != target.shape()) {
        throw ShapeError("dice_loss: " + shape_str(logits.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    Tensor<S> p = sigmoid(logits);
    Tensor<S> num = scalar_add(scalar_mul(reduce_sum(mul(p, target)), S(2)), S(1));
    Tensor<S> den = scalar_add(add(reduce_sum(p), reduce_sum(target)), S(1));
    return sub(Tensor<S>::scalar(S(1)), div(num, den));
}

/// Mean binary cross entropy from logits in the softplus-stable form
///   max(z,0) - z t + log(1 + exp(-|z|)),
/// fused into one primitive with backward (sigmoid(z) - t) / n. The target
/// is treated as constant.
template <typename S>
Tensor<S> bce_loss(const Tensor<S>& logits, const Tensor<S>& target) {
    if (logits.shape() != target.shape()) {
        throw ShapeError("bce_loss: " + shape_str(logits.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    const Index n = logits.numel();
    double acc = 0;
    for (Index i = 0; i < n; ++i) {
        const double z = static_cast<double>(logits.at(i));
        const double t = static_cast<double>(target.at(i));
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor<S> loss = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
    ensure_finite(loss, "bce_loss");
    if (should_record<S>({&logits})) {
        Tape<S>::active()->record("bce_loss", {&logits}, loss, [logits, target, loss, n](Tape<S>& t) {
            const auto* g = t.find_grad(loss.id());
            if (!g) return;
            const S g0 = (*g)[0] / static_cast<S>(n);
            typename Tape<S>::GradArray gz(n);
            for (Index i = 0; i < n; ++i) {
                gz[i] = g0 * (stable_sigmoid(logits.at(i)) - target.at(i));
            }
            t.accumulate(logits, std::move(gz));
        });
    }
    return loss;
}

}  // namespace cvattn
