#pragma once

#include "cvattn/ops.hpp"

namespace cvattn {

enum class DtMetric { euclidean, squared_euclidean };

inline const char* to_string(DtMetric m) {
    return m == DtMetric::euclidean ? "euclidean" : "squared-euclidean";
}

/// Soft distance transform parameters: temperature lambda (pixels) and the
/// truncation radius of the kernel. The squared-euclidean metric factorizes
/// into two 1-d convolutions and is selectable per gate.
struct DtParams {
    double lambda_dt = 0.5;
    Index kernel_radius = 7;
    DtMetric metric = DtMetric::euclidean;
    bool allow_truncation = false;  // lift the exp(-R/lambda) < 1e-6 guard

    void validate() const {
        if (lambda_dt <= 0) throw ConfigError("DtParams: lambda_dt > 0 required");
        if (kernel_radius < 1) throw ConfigError("DtParams: kernel_radius >= 1 required");
        if (!allow_truncation &&
            std::exp(-static_cast<double>(kernel_radius) / lambda_dt) >= 1e-6) {
            throw ConfigError(
                "DtParams: truncation guard exp(-R/lambda) < 1e-6 violated (R = " +
                std::to_string(kernel_radius) + ", lambda = " + std::to_string(lambda_dt) +
                "); enlarge the radius or set allow_truncation");
        }
    }
};

/// K(u) = exp(-||u|| / lambda) (euclidean) or exp(-||u||^2 / lambda)
/// (squared-euclidean) on the (2R+1)^2 offset grid; center value exactly 1.
/// The squared-euclidean kernel is built as the outer product of its two 1-d
/// factors, so separability holds bitwise and matches the two-pass
/// convolution route.
template <typename S>
Tensor<S> dt_kernel(const DtParams& p) {
    p.validate();
    const Index r = p.kernel_radius;
    const Index k = 2 * r + 1;
    Tensor<S> kernel = Tensor<S>::zeros({k, k});
    if (p.metric == DtMetric::squared_euclidean) {
        std::vector<S> one_d(static_cast<std::size_t>(k));
        for (Index d = -r; d <= r; ++d) {
            one_d[static_cast<std::size_t>(d + r)] =
                static_cast<S>(std::exp(-static_cast<double>(d * d) / p.lambda_dt));
        }
        for (Index dy = 0; dy < k; ++dy)
            for (Index dx = 0; dx < k; ++dx)
                kernel.raw()[dy * k + dx] = one_d[static_cast<std::size_t>(dy)] *
                                            one_d[static_cast<std::size_t>(dx)];
        return kernel;
    }
    for (Index dy = -r; dy <= r; ++dy) {
        for (Index dx = -r; dx <= r; ++dx) {
            const double d = std::sqrt(static_cast<double>(dy * dy + dx * dx));
            kernel.raw()[(dy + r) * k + (dx + r)] = static_cast<S>(std::exp(-d / p.lambda_dt));
        }
    }
    return kernel;
}

struct DtDiagnostics {
    Index floored_pixels = 0;  // pixels where the additive floor dominated
};

/// Differentiable distance transform
///   beta = -lambda log(alpha * K + floor),   floor = 1e-20,
/// with zero padding outside the domain. For a one-hot alpha the result is
/// the exact truncated distance to the hot pixel. Accepts [H,W] or
/// [N,1,H,W]; output matches the input shape.
template <typename S>
Tensor<S> soft_distance_transform(const Tensor<S>& alpha_in, const DtParams& p,
                                  DtDiagnostics* diag = nullptr) {
    p.validate();
    const bool rank2 = alpha_in.rank() == 2;
    Tensor<S> alpha = rank2 ? reshape(alpha_in, {1, 1, alpha_in.extent(0), alpha_in.extent(1)})
                            : alpha_in;
    if (alpha.rank() != 4 || alpha.extent(1) != 1) {
        throw ShapeError("soft_distance_transform: [H,W] or [N,1,H,W] input required, got " +
                         shape_str(alpha_in.shape()));
    }
    const S floor = S(1e-20);
    const Index r = p.kernel_radius;
    Tensor<S> conv;
    if (p.metric == DtMetric::squared_euclidean) {
        // exp(-(dy^2+dx^2)/lambda) is the outer product of two 1-d kernels.
        const Index k = 2 * r + 1;
        Tensor<S> krow = Tensor<S>::zeros({1, 1, 1, k});
        for (Index d = -r; d <= r; ++d) {
            krow.raw()[d + r] = static_cast<S>(std::exp(-static_cast<double>(d * d) / p.lambda_dt));
        }
        Tensor<S> kcol = reshape(krow, {1, 1, k, 1});
        conv = conv2d_hw(conv2d_hw(alpha, krow, Tensor<S>(), 1, 0, r), kcol, Tensor<S>(), 1, r, 0);
    } else {
        Tensor<S> kernel = reshape(dt_kernel<S>(p), {1, 1, 2 * r + 1, 2 * r + 1});
        conv = conv2d(alpha, kernel, Tensor<S>(), 1, r);
    }
    if (diag) {
        diag->floored_pixels = 0;
        for (Index i = 0; i < conv.numel(); ++i) {
            if (conv.at(i) < floor) ++diag->floored_pixels;
        }
    }
    Tensor<S> beta = scalar_mul(cvattn::log(scalar_add(conv, floor)), static_cast<S>(-p.lambda_dt));
    return rank2 ? reshape(beta, alpha_in.shape()) : beta;
}

/// Brute-force exact Euclidean distance to the nearest foreground pixel;
/// the non-differentiable oracle for the soft transform's lambda -> 0 limit.
template <typename S>
Tensor<S> exact_edt(const Tensor<S>& mask) {
    if (mask.rank() != 2) throw ShapeError("exact_edt: rank-2 mask required, got " + shape_str(mask.shape()));
    const Index h = mask.extent(0), w = mask.extent(1);
    std::vector<std::pair<Index, Index>> fg;
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            if (mask.at(y * w + x) != S(0)) fg.emplace_back(y, x);
        }
    }
    if (fg.empty()) throw Error("exact_edt: mask has no foreground pixel");
    Tensor<S> d = Tensor<S>::zeros({h, w});
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            Index best = std::numeric_limits<Index>::max();
            for (const auto& [fy, fx] : fg) {
                const Index dy = fy - y, dx = fx - x;
                best = std::min(best, dy * dy + dx * dx);
                if (best == 0) break;
            }
            d.raw()[y * w + x] = static_cast<S>(std::sqrt(static_cast<double>(best)));
        }
    }
    return d;
}

}  // namespace cvattn
