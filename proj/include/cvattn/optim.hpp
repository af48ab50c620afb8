#pragma once

#include "cvattn/tape.hpp"

namespace cvattn {

/// Adam with decoupled weight decay:
///   m,v exponential moving averages with bias correction,
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay theta).
template <typename S>
class AdamW {
public:
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_opt = 1e-8;
    double weight_decay = 1e-2;

    std::int64_t step_count() const { return t_; }

    void step(ParamStore<S>& params, const std::vector<Tensor<S>>& grads) {
        if (grads.size() != params.size()) {
            throw ConfigError("AdamW::step: " + std::to_string(grads.size()) + " gradients for " +
                              std::to_string(params.size()) + " parameters");
        }
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i] = Tensor<S>::Storage::Zero(params.at(i).numel());
                v_[i] = Tensor<S>::Storage::Zero(params.at(i).numel());
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor<S>& g = grads[i];
            if (g.shape() != params.at(i).shape()) {
                throw ShapeError("AdamW::step: gradient shape " + shape_str(g.shape()) +
                                 " for parameter " + params.name(i));
            }
            if (!g.all_finite()) {
                throw NumericError("AdamW::step: non-finite gradient for parameter " + params.name(i));
            }
            Tensor<S> next = params.at(i).clone();
            auto& m = m_[i];
            auto& v = v_[i];
            for (Index k = 0; k < g.numel(); ++k) {
                const double gv = static_cast<double>(g.at(k));
                m[k] = static_cast<S>(beta1 * m[k] + (1.0 - beta1) * gv);
                v[k] = static_cast<S>(beta2 * v[k] + (1.0 - beta2) * gv * gv);
                const double m_hat = static_cast<double>(m[k]) / bc1;
                const double v_hat = static_cast<double>(v[k]) / bc2;
                const double theta = static_cast<double>(next.at(k));
                next.raw()[k] = static_cast<S>(
                    theta - lr * (m_hat / (std::sqrt(v_hat) + eps_opt) + weight_decay * theta));
            }
            params.set(i, std::move(next));
        }
    }

private:
    std::int64_t t_ = 0;
    std::vector<typename Tensor<S>::Storage> m_;
    std::vector<typename Tensor<S>::Storage> v_;
};

}  // namespace cvattn
